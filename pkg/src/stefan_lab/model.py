"""Continuous model: regularized jump nonlinearity, enthalpy map, flux field, grid domains.

The temperature-to-enthalpy map is built from a smooth bump mollifier applied
to a unit step centered at ``a``; the diffusion flux is a (possibly
regularized) p-Laplacian field.  Grid domains are unions of grid cells with an
explicit node classification and a discrete outer-density certificate for
lateral boundary nodes.

All objects are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator


class InvalidParameterError(ValueError):
    """Raised when a parameter set violates a structural requirement."""


def bar_q(n: int, p: float) -> float:
    """Lower integrability threshold for the exponent q, as a function of (n, p)."""
    if n < 1 or int(n) != n:
        raise InvalidParameterError(f"dimension n must be a positive integer, got {n}")
    if p < 2:
        raise InvalidParameterError(f"exponent p must be >= 2, got {p}")
    if p < n:
        return 1.0 + n / p
    return 2.0


# ---------------------------------------------------------------------------
# Mollifier table (shared by all MollifiedHeaviside instances).
#
# rho(s) = C * exp(-1/(1-s^2)) on (-1, 1); its cumulative integral is
# tabulated once on 256 Gauss-Legendre panels and evaluated through a
# monotone cubic (PCHIP) interpolant, so the ramp is exactly 0 / 1 outside
# the support and monotone inside it.
# ---------------------------------------------------------------------------

_N_PANELS = 256
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _bump_unnormalized(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s, dtype=float)
    inside = np.abs(s) < 1.0
    si = s[inside]
    out[inside] = np.exp(-1.0 / (1.0 - si * si))
    return out


def _build_mollifier_table() -> tuple[np.ndarray, np.ndarray, float]:
    knots = np.linspace(-1.0, 1.0, _N_PANELS + 1)
    panel = np.zeros(_N_PANELS)
    for k in range(_N_PANELS):
        a, b = knots[k], knots[k + 1]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        panel[k] = half * np.sum(_GL_WEIGHTS * _bump_unnormalized(mid + half * _GL_NODES))
    total = panel.sum()
    cdf = np.concatenate(([0.0], np.cumsum(panel))) / total
    cdf[-1] = 1.0
    return knots, cdf, 1.0 / total


_KNOTS, _CDF_VALUES, _BUMP_NORMALIZER = _build_mollifier_table()
_CDF_INTERP = PchipInterpolator(_KNOTS, _CDF_VALUES, extrapolate=False)


def mollifier(s):
    """Normalized smooth bump supported in (-1, 1)."""
    s = np.asarray(s, dtype=float)
    return _BUMP_NORMALIZER * _bump_unnormalized(s)


class MollifiedHeaviside:
    """Smooth ramp from 0 to 1 across (a - eps, a + eps).

    Convolution of the unit step at ``a`` with the rescaled bump mollifier;
    evaluated in closed form as the mollifier's cumulative integral at
    (s - a)/eps.  The derivative is supported exactly in (a - eps, a + eps)
    and integrates to one.
    """

    def __init__(self, a: float, eps: float):
        if eps <= 0.0:
            raise InvalidParameterError(f"regularization width eps must be > 0, got {eps}")
        self.a = float(a)
        self.eps = float(eps)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        y = (s - self.a) / self.eps
        out = np.where(y >= 1.0, 1.0, 0.0)
        inside = (y > -1.0) & (y < 1.0)
        if np.any(inside):
            out = np.where(inside, _CDF_INTERP(np.clip(y, -1.0, 1.0)), out)
        out = np.clip(out, 0.0, 1.0)
        return out if out.ndim else float(out)

    def deriv(self, s):
        s = np.asarray(s, dtype=float)
        out = mollifier((s - self.a) / self.eps) / self.eps
        return out if out.ndim else float(out)

    def rescaled(self, lam: float) -> "MollifiedHeaviside":
        """Ramp for the jump-center and width divided by lam."""
        return MollifiedHeaviside(self.a / lam, self.eps / lam)

    def __repr__(self):
        return f"MollifiedHeaviside(a={self.a}, eps={self.eps})"


def heaviside_eval(H: MollifiedHeaviside, s) -> float:
    return H(s)


@dataclass(frozen=True)
class BetaMap:
    """Bi-Lipschitz increasing transform u -> u + kappa_b*sin(u).

    kappa_b = 0 gives the identity.  The derivative lies in
    [1 - kappa_b, 1 + kappa_b], hence the two-sided Lipschitz constant is
    1/(1 - kappa_b).
    """

    kappa_b: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.kappa_b < 1.0:
            raise InvalidParameterError(
                f"perturbation amplitude kappa_b must be in [0, 1), got {self.kappa_b}"
            )

    @property
    def lam(self) -> float:
        return 1.0 / (1.0 - self.kappa_b)

    @property
    def lipschitz(self) -> float:
        return 1.0 + self.kappa_b

    def __call__(self, u):
        if self.kappa_b == 0.0:
            return np.asarray(u, dtype=float) if np.ndim(u) else float(u)
        return u + self.kappa_b * np.sin(u)

    def deriv(self, u):
        if self.kappa_b == 0.0:
            return np.ones_like(np.asarray(u, dtype=float)) if np.ndim(u) else 1.0
        return 1.0 + self.kappa_b * np.cos(u)

    def inverse(self, w):
        if self.kappa_b == 0.0:
            return np.asarray(w, dtype=float) if np.ndim(w) else float(w)
        w_arr = np.asarray(w, dtype=float)
        u = w_arr.copy()
        # Newton; the derivative is bounded below by 1 - kappa_b > 0.
        for _ in range(60):
            f = u + self.kappa_b * np.sin(u) - w_arr
            if np.max(np.abs(f)) < 1e-14 * max(1.0, float(np.max(np.abs(w_arr)))):
                break
            u = u - f / (1.0 + self.kappa_b * np.cos(u))
        return u if np.ndim(w) else float(u)


@dataclass(frozen=True)
class EnthalpyMap:
    """Strictly increasing map s -> s + H(s) with derivative >= 1."""

    heaviside: MollifiedHeaviside

    def __call__(self, s):
        return s + self.heaviside(s)

    def deriv(self, s):
        return 1.0 + self.heaviside.deriv(s)

    def invert(self, e: float) -> float:
        """Solve s + H(s) = e.  Bisection-safe since the slope is >= 1."""
        lo, hi = e - 1.0, e
        # H in [0, 1] brackets the root in [e-1, e].
        s = 0.5 * (lo + hi)
        for _ in range(200):
            f = s + self.heaviside(s) - e
            if f > 0.0:
                hi = s
            else:
                lo = s
            s_new = s - f / (1.0 + self.heaviside.deriv(s))
            if not (lo <= s_new <= hi):
                s_new = 0.5 * (lo + hi)
            if abs(s_new - s) < 1e-17 * max(1.0, abs(e)):
                s = s_new
                break
            s = s_new
        # final polish
        for _ in range(3):
            f = s + self.heaviside(s) - e
            if abs(f) <= 1e-13 * max(1.0, abs(e)):
                break
            s -= f / (1.0 + self.heaviside.deriv(s))
        return float(s)


def enthalpy_invert(E: EnthalpyMap, e: float) -> float:
    return E.invert(e)


class VectorField:
    """Diffusion flux with p-growth and coercivity.

    kind='p_laplacian' is (|xi|^2 + mu^2)^((p-2)/2) xi; at mu = 0 this is the
    exact p-Laplacian flux.  kind='p_laplacian_with_coefficient' multiplies by
    a scalar coefficient c(x, t, u), measurable in (x, t) and continuous in u,
    with values in [1/Lambda, Lambda].

    The continuity moduli in (u, xi) and the local bound K are stored as
    callable descriptors of the configured field; no quantitative estimate
    consumes them.
    """

    def __init__(
        self,
        p: float,
        kind: str = "p_laplacian",
        Lambda: float = 1.0,
        coefficient=None,
        omega_u=None,
        omega_xi=None,
        K=None,
    ):
        if p < 2:
            raise InvalidParameterError(f"exponent p must be >= 2, got {p}")
        if Lambda < 1:
            raise InvalidParameterError(f"ellipticity constant must be >= 1, got {Lambda}")
        if kind not in ("p_laplacian", "p_laplacian_with_coefficient"):
            raise InvalidParameterError(f"unknown vector field kind {kind!r}")
        if kind == "p_laplacian_with_coefficient" and coefficient is None:
            raise InvalidParameterError("coefficient kind requires a coefficient sampler")
        self.p = float(p)
        self.kind = kind
        self.Lambda = float(Lambda)
        self.coefficient = coefficient
        self.omega_u = omega_u if omega_u is not None else (lambda rho: min(1.0, rho))
        self.omega_xi = omega_xi if omega_xi is not None else (lambda rho: min(1.0, rho))
        self.K = K if K is not None else (lambda M, M_tilde: 1.0)

    def _scalar_factor(self, x, t, u) -> float:
        if self.kind == "p_laplacian":
            return 1.0
        return float(self.coefficient(x, t, u))

    def flux(self, x, t, u, xi, mu: float = 0.0):
        xi = np.asarray(xi, dtype=float)
        norm2 = np.sum(xi * xi, axis=-1, keepdims=True) if xi.ndim else xi * xi
        m = (norm2 + mu * mu) ** ((self.p - 2.0) / 2.0)
        return self._scalar_factor(x, t, u) * m * xi

    def flux_deriv_scalar(self, d, mu: float = 0.0):
        """d/dd of the 1-D flux (d^2 + mu^2)^((p-2)/2) d; nonnegative."""
        d = np.asarray(d, dtype=float)
        s2 = d * d + mu * mu
        base = s2 ** ((self.p - 2.0) / 2.0)
        if self.p == 2.0:
            return np.ones_like(d)
        with np.errstate(invalid="ignore", divide="ignore"):
            extra = (self.p - 2.0) * np.where(s2 > 0.0, s2 ** ((self.p - 4.0) / 2.0), 0.0) * d * d
        return base + extra


def flux_eval(A: VectorField, x, t, u, xi, mu: float = 0.0):
    return A.flux(x, t, u, xi, mu=mu)


# ---------------------------------------------------------------------------
# Model parameter container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """All structural constants of the model plus the derived maps.

    The smallness chain eps1 <= eps2^(p-2), eps1 <= eps2, eps1 <= 2^-10 is
    what the oscillation-reduction argument ultimately requires; it makes the
    auxiliary scale tilde-omega underflow any double at desk resolution, so
    validate() enforces it only in strict mode and `paper_smallness_ok`
    reports it otherwise.
    """

    p: float = 2.0
    n: int = 1
    Lambda: float = 1.0
    a: float = 0.0
    eps: float = 0.1
    delta: float = 0.5
    r_Omega: float = 0.25
    q: float = 3.0
    theta: float = 0.05
    tau: float = 0.05
    eps1: float = 2.0 ** -10
    eps2: float = 2.0 ** -10
    eps3: float = 2.0 ** -7
    eps4: float = 0.1
    lambda0: object = None       # None -> anchored default exp(exp(theta^(-1/alpha)))
    R0: float = 0.25
    beta_kappa: float = 0.0
    mu_reg: float = 0.0
    alpha_tilde: float = 0.25
    M_tilde: float = 1.0

    def __post_init__(self):
        self.validate(strict=False)

    @property
    def p_prime(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def alpha(self) -> float:
        return 1.0 / (self.p_prime * self.q)

    @property
    def paper_smallness_ok(self) -> bool:
        return (
            self.eps1 <= self.eps2 ** (self.p - 2.0) + 1e-15
            and self.eps1 <= self.eps2
            and self.eps1 <= 2.0 ** -10
        )

    def validate(self, strict: bool = True) -> None:
        if self.p < 2.0:
            raise InvalidParameterError(f"p must be >= 2, got {self.p}")
        if self.Lambda < 1.0:
            raise InvalidParameterError(f"Lambda must be >= 1, got {self.Lambda}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidParameterError(f"delta must be in (0, 1), got {self.delta}")
        if self.eps <= 0.0:
            raise InvalidParameterError(f"eps must be > 0, got {self.eps}")
        if self.r_Omega <= 0.0 or self.R0 <= 0.0:
            raise InvalidParameterError("r_Omega and R0 must be > 0")
        qb = bar_q(self.n, self.p)
        if self.q <= qb:
            raise InvalidParameterError(
                f"q must exceed bar_q(n={self.n}, p={self.p}) = {qb}, got q = {self.q}"
            )
        for name in ("theta", "tau"):
            v = getattr(self, name)
            if not 0.0 < v < 0.5:
                raise InvalidParameterError(f"{name} must lie in (0, 1/2), got {v}")
        for name in ("eps1", "eps2", "eps3", "eps4"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidParameterError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.beta_kappa < 1.0:
            raise InvalidParameterError(f"beta_kappa must be in [0, 1), got {self.beta_kappa}")
        if self.mu_reg < 0.0:
            raise InvalidParameterError(f"mu_reg must be >= 0, got {self.mu_reg}")
        if self.eps1 > self.eps2 ** (self.p - 2.0) + 1e-15 or self.eps1 > self.eps2:
            raise InvalidParameterError(
                f"eps1 = {self.eps1} must not exceed min(eps2^(p-2), eps2)"
            )
        if strict and not self.paper_smallness_ok:
            raise InvalidParameterError(
                f"strict smallness requires eps1 <= 2^-10, got eps1 = {self.eps1}"
            )

    @cached_property
    def beta(self) -> BetaMap:
        return BetaMap(self.beta_kappa)

    @cached_property
    def heaviside(self) -> MollifiedHeaviside:
        return MollifiedHeaviside(self.a, self.eps)

    @cached_property
    def enthalpy(self) -> EnthalpyMap:
        return EnthalpyMap(self.heaviside)

    @cached_property
    def flux_field(self) -> VectorField:
        return VectorField(self.p, Lambda=self.Lambda)

    def rescaled(self, lam: float) -> "ModelParams":
        """Jump center and width divided by lam; structural constants unchanged."""
        return ModelParams(
            p=self.p, n=self.n, Lambda=self.Lambda,
            a=self.a / lam, eps=self.eps / lam,
            delta=self.delta, r_Omega=self.r_Omega, q=self.q,
            theta=self.theta, tau=self.tau,
            eps1=self.eps1, eps2=self.eps2, eps3=self.eps3, eps4=self.eps4,
            lambda0=self.lambda0, R0=self.R0, beta_kappa=self.beta_kappa,
            mu_reg=self.mu_reg, alpha_tilde=self.alpha_tilde, M_tilde=self.M_tilde,
        )


# ---------------------------------------------------------------------------
# Grid domains
# ---------------------------------------------------------------------------


class GridDomain:
    """Rectilinear space-time grid over a cell-union domain.

    Nodes live on the lattice origin + h*Z^n.  A node is *interior* when all
    its surrounding cells belong to the domain, *lateral* when it touches both
    domain and non-domain cells, *exterior* otherwise; the classification is
    exhaustive and disjoint.  The initial boundary is the t = 0 slice of the
    non-exterior nodes.
    """

    def __init__(self, cells: np.ndarray, h: float, T: float, dt: float,
                 origin=None, periodic: bool = False):
        cells = np.asarray(cells, dtype=bool)
        if cells.ndim not in (1, 2):
            raise InvalidParameterError("only 1-D and 2-D domains are supported")
        if h <= 0 or dt <= 0 or T <= 0:
            raise InvalidParameterError("h, dt, T must all be > 0")
        n_steps = round(T / dt)
        if abs(n_steps * dt - T) > 1e-9 * T or n_steps < 1:
            raise InvalidParameterError(f"T = {T} must be an integer multiple of dt = {dt}")
        self.cells = cells
        self.n = cells.ndim
        self.h = float(h)
        self.T = float(T)
        self.dt = float(dt)
        self.n_steps = n_steps
        self.periodic = periodic
        self.origin = tuple(origin) if origin is not None else (0.0,) * self.n
        self.shape = tuple(s if periodic else s + 1 for s in cells.shape)
        self.times = np.linspace(0.0, self.T, self.n_steps + 1)
        self._classify()

    @classmethod
    def interval(cls, length: float, h: float, T: float, dt: float) -> "GridDomain":
        n_cells = round(length / h)
        if abs(n_cells * h - length) > 1e-9 * length:
            raise InvalidParameterError("interval length must be an integer multiple of h")
        return cls(np.ones(n_cells, dtype=bool), h, T, dt)

    @classmethod
    def periodic_interval(cls, length: float, h: float, T: float, dt: float) -> "GridDomain":
        n_cells = round(length / h)
        if abs(n_cells * h - length) > 1e-9 * length:
            raise InvalidParameterError("interval length must be an integer multiple of h")
        return cls(np.ones(n_cells, dtype=bool), h, T, dt, periodic=True)

    @classmethod
    def rectangle(cls, lx: float, ly: float, h: float, T: float, dt: float) -> "GridDomain":
        nx, ny = round(lx / h), round(ly / h)
        if abs(nx * h - lx) > 1e-9 * lx or abs(ny * h - ly) > 1e-9 * ly:
            raise InvalidParameterError("rectangle sides must be integer multiples of h")
        return cls(np.ones((nx, ny), dtype=bool), h, T, dt)

    def _classify(self):
        if self.periodic:
            self.interior = np.ones(self.shape, dtype=bool)
            self.lateral = np.zeros(self.shape, dtype=bool)
            self.exterior = np.zeros(self.shape, dtype=bool)
            return
        padded = np.zeros(tuple(s + 2 for s in self.cells.shape), dtype=bool)
        padded[(slice(1, -1),) * self.n] = self.cells
        if self.n == 1:
            touch = np.stack([padded[:-1], padded[1:]])
        else:
            touch = np.stack([
                padded[:-1, :-1], padded[:-1, 1:], padded[1:, :-1], padded[1:, 1:],
            ])
        any_in = touch.any(axis=0)
        all_in = touch.all(axis=0)
        self.interior = all_in
        self.lateral = any_in & ~all_in
        self.exterior = ~any_in

    @property
    def in_closure(self) -> np.ndarray:
        return ~self.exterior

    @cached_property
    def node_coords(self) -> np.ndarray:
        """Array of shape (*self.shape, n) with node coordinates."""
        axes = [self.origin[k] + self.h * np.arange(self.shape[k]) for k in range(self.n)]
        if self.n == 1:
            return axes[0][:, None]
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def ball_mask(self, x0, r: float) -> np.ndarray:
        """Nodes whose control-volume center lies in the closed ball B_r(x0)."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        d2 = np.sum((self.node_coords - x0) ** 2, axis=-1)
        return d2 <= r * r * (1.0 + 1e-12)

    def time_level_of(self, t: float) -> int:
        m = round(t / self.dt)
        if abs(m * self.dt - t) > 1e-8 * max(1.0, self.T) or not 0 <= m <= self.n_steps:
            raise InvalidParameterError(f"t = {t} is not a grid time level")
        return m

    def lattice_ball_count(self, x0, r: float) -> int:
        """Nodes of the ambient (unbounded) lattice inside the closed ball."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        k = int(math.floor(r / self.h + 1e-12))
        offsets = np.arange(-k, k + 1)
        if self.n == 1:
            i0 = round((x0[0] - self.origin[0]) / self.h)
            pts = (self.origin[0] + self.h * (i0 + offsets))[:, None]
        else:
            i0 = round((x0[0] - self.origin[0]) / self.h)
            j0 = round((x0[1] - self.origin[1]) / self.h)
            gx, gy = np.meshgrid(self.origin[0] + self.h * (i0 + offsets),
                                 self.origin[1] + self.h * (j0 + offsets), indexing="ij")
            pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        d2 = np.sum((pts - x0) ** 2, axis=-1)
        return int(np.count_nonzero(d2 <= r * r * (1.0 + 1e-12)))


@dataclass
class DensityRow:
    node_index: tuple
    x0: tuple
    r: float
    inside: int
    total: int

    @property
    def ratio(self) -> float:
        return self.inside / self.total


@dataclass
class DensityReport:
    rows: list
    delta: float

    @property
    def empty(self) -> bool:
        return not self.rows

    @property
    def passed(self) -> bool:
        if self.empty:
            return False
        bound = 1.0 - self.delta + 1e-12
        return all(row.ratio <= bound for row in self.rows)

    @property
    def worst_ratio(self) -> float:
        return max((row.ratio for row in self.rows), default=float("nan"))


def check_outer_density(D: GridDomain, delta: float, r_Omega: float) -> DensityReport:
    """Cell-counting certificate for the outer density condition.

    For every lateral boundary node and every grid radius r <= r_Omega the
    row carries |B_r cap Omega| / |B_r| (interior nodes over ambient lattice
    nodes); the report passes when all ratios are <= 1 - delta.  A domain
    without lateral boundary yields an empty report, signalling a degenerate
    configuration.
    """
    rows: list[DensityRow] = []
    lateral_idx = np.argwhere(D.lateral)
    if lateral_idx.size == 0:
        return DensityReport(rows=[], delta=delta)
    radii = [k * D.h for k in range(1, int(math.floor(r_Omega / D.h + 1e-12)) + 1)]
    coords = D.node_coords
    interior_pts = coords[D.interior].reshape(-1, D.n)
    for idx in lateral_idx:
        idx_t = tuple(int(i) for i in idx)
        x0 = coords[idx_t]
        d2 = np.sum((interior_pts - x0) ** 2, axis=-1)
        for r in radii:
            inside = int(np.count_nonzero(d2 <= r * r * (1.0 + 1e-12)))
            total = D.lattice_ball_count(x0, r)
            rows.append(DensityRow(idx_t, tuple(x0), r, inside, total))
    return DensityReport(rows=rows, delta=delta)
