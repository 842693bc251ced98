"""Parabolic and intrinsic cylinders, time scales, cutoffs, and rescaling.

Set membership is deterministic: a cylinder contains a node iff the node's
control-volume center lies in the closed cylinder, and time windows are taken
at closed grid levels on both ends.  The three time scales and the auxiliary
oscillation scale are also carried in log form, because at small eps1*omega
the auxiliary scale underflows any double while the orderings remain exact in
log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import GridDomain, InvalidParameterError, ModelParams


class EmptyIntersectionError(ValueError):
    """Cylinder meets no grid node of the domain closure."""


class TimeScaleOrderingError(ValueError):
    """The configured eps1, eps2 break the time-scale ordering."""


# ---------------------------------------------------------------------------
# Cylinders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cylinder:
    """Axis-aligned space-time cylinder B_r(x0) x (t_lo, t_hi]."""

    x0: tuple
    t0: float
    r: float
    t_lo: float
    t_hi: float
    kind: str = "generic"

    @classmethod
    def symmetric(cls, x0, t0: float, r: float, p: float) -> "Cylinder":
        L = r ** p
        return cls(tuple(np.atleast_1d(x0)), t0, r, t0 - L, t0 + L, kind="symmetric")

    @classmethod
    def stretched(cls, x0, t0: float, r: float, p: float, rho: float) -> "Cylinder":
        L = rho ** (2.0 - p) * r ** p
        return cls(tuple(np.atleast_1d(x0)), t0, r, t0 - L, t0 + L, kind="stretched")

    @classmethod
    def backward(cls, x0, t0: float, r: float, length: float) -> "Cylinder":
        return cls(tuple(np.atleast_1d(x0)), t0, r, t0 - length, t0, kind="backward")

    def scaled(self, sigma: float) -> "Cylinder":
        """sigma * Q for backward cylinders: radius and time length both scale."""
        if self.kind != "backward":
            raise InvalidParameterError("scaled() is defined for backward cylinders")
        return Cylinder(self.x0, self.t0, sigma * self.r,
                        self.t0 - sigma * (self.t0 - self.t_lo), self.t0, kind="backward")

    def space_mask(self, D: GridDomain) -> np.ndarray:
        return D.ball_mask(self.x0, self.r) & D.in_closure

    def time_levels(self, D: GridDomain) -> np.ndarray:
        lo = max(self.t_lo, 0.0)
        hi = min(self.t_hi, D.T)
        if hi < lo:
            return np.array([], dtype=int)
        m_lo = int(math.ceil(lo / D.dt - 1e-9))
        m_hi = int(math.floor(hi / D.dt + 1e-9))
        return np.arange(max(m_lo, 0), min(m_hi, D.n_steps) + 1)

    def node_count(self, D: GridDomain) -> int:
        return int(np.count_nonzero(self.space_mask(D))) * len(self.time_levels(D))

    def same_extent(self, other: "Cylinder", tol: float = 1e-12) -> bool:
        return (self.x0 == other.x0
                and abs(self.r - other.r) <= tol
                and abs(self.t_lo - other.t_lo) <= tol
                and abs(self.t_hi - other.t_hi) <= tol)


# ---------------------------------------------------------------------------
# Time scales
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeScales:
    """T1 <= tilde^(2-p) r^p <= T2 <= T3, with exact log-space companions.

    Float fields may round to 0.0 or overflow to inf when the auxiliary
    scale leaves double range; the log fields are always finite.
    """

    T1: float
    T2: float
    T3: float
    tilde_omega: float
    log_T1: float
    log_T2: float
    log_T3: float
    log_mid: float
    log_tilde_omega: float


def time_scales(omega: float, r: float, P: ModelParams) -> TimeScales:
    """The three oscillation-dependent time scales and the auxiliary scale.

    tilde = eps1*omega*exp(-(eps1*omega)^(-p'q)); T1 = (eps1*omega)^(2-p) r^p,
    T2 = (eps2*tilde)^(2-p) r^p, T3 = tilde^(1-p) r^p.  The chain
    T1 <= tilde^(2-p) r^p <= T2 <= T3 is verified in log space and a violation
    (possible only when eps1 > eps2^(p-2)) raises.
    """
    if not 0.0 < omega <= 1.0:
        raise InvalidParameterError(f"omega must lie in (0, 1], got {omega}")
    if r <= 0.0:
        raise InvalidParameterError(f"radius must be > 0, got {r}")
    p, q = P.p, P.q
    p_prime = p / (p - 1.0)
    if P.eps1 > P.eps2 ** (p - 2.0) + 1e-15:
        raise TimeScaleOrderingError(
            f"precondition eps1 <= eps2^(p-2) fails: {P.eps1} > {P.eps2 ** (p - 2.0)}")
    e1w = P.eps1 * omega
    log_e1w = math.log(e1w)
    log_tilde = log_e1w - e1w ** (-p_prime * q)
    log_rp = p * math.log(r)
    log_T1 = (2.0 - p) * log_e1w + log_rp
    log_mid = (2.0 - p) * log_tilde + log_rp
    log_T2 = (2.0 - p) * (math.log(P.eps2) + log_tilde) + log_rp
    log_T3 = (1.0 - p) * log_tilde + log_rp
    if not (log_T1 <= log_mid + 1e-12 and log_mid <= log_T2 + 1e-12
            and log_T2 <= log_T3 + 1e-12):
        raise TimeScaleOrderingError(
            f"time-scale ordering violated: logs = ({log_T1}, {log_mid}, {log_T2}, {log_T3})")
    # tilde < eps1*omega/2 always, since (eps1*omega)^(-p'q) > log 2 for eps1*omega <= 1
    if not log_tilde < log_e1w - math.log(2.0):
        raise TimeScaleOrderingError("auxiliary scale is not below eps1*omega/2")

    def _safe_exp(x: float) -> float:
        if x > 709.0:
            return math.inf
        if x < -745.0:
            return 0.0
        return math.exp(x)

    return TimeScales(
        T1=_safe_exp(log_T1), T2=_safe_exp(log_T2), T3=_safe_exp(log_T3),
        tilde_omega=_safe_exp(log_tilde),
        log_T1=log_T1, log_T2=log_T2, log_T3=log_T3,
        log_mid=log_mid, log_tilde_omega=log_tilde,
    )


def tilde_omega(omega: float, eps1: float, p: float, q: float) -> float:
    """Auxiliary oscillation scale eps1*omega*exp(-(eps1*omega)^(-p'q))."""
    p_prime = p / (p - 1.0)
    e1w = eps1 * omega
    return math.exp(math.log(e1w) - e1w ** (-p_prime * q)) if e1w > 0 else 0.0


def t4(omega: float, r: float, p: float, T: float) -> float:
    """Initial-boundary time scale min(omega^(2-p) r^p, T)."""
    if omega <= 0.0 or r <= 0.0 or T <= 0.0:
        raise InvalidParameterError("omega, r, T must all be > 0")
    return min(omega ** (2.0 - p) * r ** p, T)


# ---------------------------------------------------------------------------
# Intrinsic cylinder sequences
# ---------------------------------------------------------------------------


def intrinsic_cylinder_sequence(x0, t0: float, state, D: GridDomain | None = None):
    """Centered cylinders B_{R_j} x (t0 - T_j, t0 + T_j) from an iteration state.

    Returns (cylinders, truncated_at): truncated_at is the first index whose
    radius falls below one grid cell (None when all indices are usable).
    Truncation is a flag, not an error; the usable part of the sequence is
    still returned in full.
    """
    cylinders = []
    truncated_at = None
    x0 = tuple(np.atleast_1d(x0))
    for j in range(len(state.R)):
        Rj = float(state.R[j])
        Tj_log = state.log_T[j]
        # clamp the (possibly astronomically long) time extent to float range
        Tj = math.inf if Tj_log > 709 else math.exp(Tj_log)
        cyl = Cylinder(x0, t0, Rj, t0 - Tj, t0 + Tj, kind="intrinsic")
        cylinders.append(cyl)
        if D is not None and truncated_at is None and Rj < D.h:
            truncated_at = j
    return cylinders, truncated_at


# ---------------------------------------------------------------------------
# Oscillation and rescaling
# ---------------------------------------------------------------------------


def oscillation(w, Q: Cylinder) -> float:
    """max - min of nodal values over Q intersected with the domain closure."""
    D = w.domain
    smask = Q.space_mask(D)
    levels = Q.time_levels(D)
    if not smask.any() or len(levels) == 0:
        raise EmptyIntersectionError(
            f"cylinder r={Q.r} at {Q.x0} x ({Q.t_lo}, {Q.t_hi}] misses the grid")
    vals = w.values[levels][:, smask]
    return float(np.nanmax(vals) - np.nanmin(vals))


def rescale_solution(w, lam: float, t0: float, P: ModelParams):
    """Divide values by lam and dilate time about t0 by lam^(p-2).

    v_hat(y, tau) = w(y, t0 + lam^(2-p)(tau - t0)) / lam, resampled on the
    original time levels with linear interpolation; the jump center and width
    of the rescaled problem are a/lam and eps/lam.  Returns (v_hat, P_hat).
    """
    from .solver import GridFunction

    if lam < 1.0:
        raise InvalidParameterError(f"scaling factor must be >= 1, got {lam}")
    D = w.domain
    factor = lam ** (2.0 - P.p)
    new_vals = np.empty_like(w.values)
    times = D.times
    for m, t in enumerate(times):
        s = t0 + factor * (t - t0)
        s = min(max(s, 0.0), D.T)
        k = min(int(math.floor(s / D.dt)), D.n_steps - 1)
        theta_interp = s / D.dt - k
        new_vals[m] = (1.0 - theta_interp) * w.values[k] + theta_interp * w.values[k + 1]
    new_vals /= lam
    return GridFunction(D, new_vals), P.rescaled(lam)


# ---------------------------------------------------------------------------
# Shrinking families and cutoffs
# ---------------------------------------------------------------------------

_FAMILY_KINDS = ("lateral_1_2", "lateral_3", "initial")


@dataclass(frozen=True)
class ShrinkFamily:
    """One of the three shrinking-cylinder families over a base cylinder.

    lateral_1_2: sigma_j = (1 + 2^-j)/16 (from Q/8 down to Q/16);
    lateral_3:   sigma_j = (1 + 2^-j)/4  (from Q/2 down to Q/4);
    initial:     radius shrinks with sigma_j = (1 + 2^-j)/4, time window fixed.
    """

    kind: str
    base: Cylinder

    def __post_init__(self):
        if self.kind not in _FAMILY_KINDS:
            raise InvalidParameterError(f"unknown family kind {self.kind!r}")
        if self.kind != "initial" and self.base.kind != "backward":
            raise InvalidParameterError("lateral families need a backward base cylinder")

    def sigma(self, j: int) -> float:
        if self.kind == "lateral_1_2":
            return (1.0 + 2.0 ** -j) / 16.0
        return (1.0 + 2.0 ** -j) / 4.0

    @property
    def sigma_limit(self) -> float:
        return 1.0 / 16.0 if self.kind == "lateral_1_2" else 0.25

    def cylinder(self, j: int) -> Cylinder:
        s = self.sigma(j)
        if self.kind == "initial":
            return replace(self.base, r=s * self.base.r)
        return self.base.scaled(s)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    """C^1 cubic ramp: 0 at 0, 1 at 1, zero slope at both ends, max slope 3/2."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _smoothstep_deriv(x: np.ndarray) -> np.ndarray:
    inside = (x > 0.0) & (x < 1.0)
    return np.where(inside, 6.0 * x * (1.0 - x), 0.0)


@dataclass(frozen=True)
class Cutoff:
    """C^1 space-time ramp: 1 on the next-inner cylinder, 0 on d_p of its own.

    The recorded bounds are the sharp constants of the cubic ramp profile:
    |Dphi| <= 1.5/gap_r and |dphi^p/dt| <= 1.5*p/gap_t.
    """

    outer: Cylinder
    inner: Cylinder
    p: float
    time_independent: bool = False

    def _space(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - np.asarray(self.outer.x0)
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        gap_r = self.outer.r - self.inner.r
        return _smoothstep((self.outer.r - d) / gap_r), d, diff, gap_r

    def _time(self, t):
        if self.time_independent:
            return np.ones_like(np.asarray(t, dtype=float)), np.zeros_like(
                np.asarray(t, dtype=float))
        gap_t = self.inner.t_lo - self.outer.t_lo
        y = (np.asarray(t, dtype=float) - self.outer.t_lo) / max(gap_t, 1e-300)
        return _smoothstep(y), _smoothstep_deriv(y) / max(gap_t, 1e-300)

    def __call__(self, x, t):
        space = self._space(x)[0]
        time_val = self._time(t)[0]
        return space * time_val

    value = __call__

    def grad(self, x, t):
        space, d, diff, gap_r = self._space(x)
        y = (self.outer.r - d) / gap_r
        time_val = self._time(t)[0]
        with np.errstate(invalid="ignore", divide="ignore"):
            fac = np.where(d > 0.0, -_smoothstep_deriv(y) / (gap_r * d), 0.0)
        return (fac * time_val)[..., None] * diff

    def dt_pow_p(self, x, t):
        """d/dt of phi^p; nonnegative since the time ramp is nondecreasing."""
        if self.time_independent:
            return np.zeros(np.broadcast(np.asarray(x)[..., 0], np.asarray(t)).shape)
        space = self._space(x)[0]
        tv, dtv = self._time(t)
        return self.p * (space * tv) ** (self.p - 1.0) * space * dtv

    def grad_bound(self) -> float:
        return 1.5 / (self.outer.r - self.inner.r)

    def dt_pow_p_bound(self) -> float:
        if self.time_independent:
            return 0.0
        return 1.5 * self.p / (self.inner.t_lo - self.outer.t_lo)

    def nodal(self, D: GridDomain, levels=None) -> np.ndarray:
        """phi sampled at nodes for the given (default: outer-window) levels."""
        if levels is None:
            levels = self.outer.time_levels(D)
        coords = D.node_coords
        out = np.zeros((len(levels),) + D.shape)
        for i, m in enumerate(levels):
            out[i] = self(coords, D.times[m])
        return out


def cutoff_build(F: ShrinkFamily, j: int, p: float) -> Cutoff:
    """Cutoff for Q_j of the family: 1 on Q_{j+1}, 0 on the parabolic boundary of Q_j."""
    if j < 0:
        raise InvalidParameterError("family index must be >= 0")
    return Cutoff(outer=F.cylinder(j), inner=F.cylinder(j + 1), p=p,
                  time_independent=(F.kind == "initial"))
