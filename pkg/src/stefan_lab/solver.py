"""Implicit solver for the regularized problem and its weak-form diagnostics.

Backward Euler in the transformed variable w: each step solves

    H(w_new) - dt * div A(x, t, w_new, D w_new) = H(w_old)

nodewise on interior nodes, with the boundary datum imposed strongly.  The
Newton iteration regularizes the flux Jacobian with a decreasing mu-schedule
(the exact Jacobian is singular where the gradient vanishes when p > 2); the
reported residual is always the mu = 0 residual.  Linear solves are banded in
1-D and diagonally-preconditioned CG in 2-D; all reductions are plain numpy
sums, so repeated runs are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import LinearOperator, cg

from .model import (
    BetaMap,
    GridDomain,
    InvalidParameterError,
    ModelParams,
    VectorField,
)


class SolverError(RuntimeError):
    """Newton failed to converge after the mu-schedule was exhausted."""

    def __init__(self, step: int, t: float, residual: float):
        super().__init__(
            f"Newton did not converge at time step {step} (t = {t:.6g}); "
            f"last mu = 0 residual = {residual:.3e}")
        self.step = step
        self.t = t
        self.residual = residual


class ConfigError(ValueError):
    """Invalid solver configuration."""


class SupportError(ValueError):
    """Test function not supported inside the required region."""


@dataclass(frozen=True)
class SolveConfig:
    newton_tol: float = 1e-10
    newton_max_iter: int = 40
    mu_schedule: tuple = (1e-2, 1e-4, 1e-6, 1e-8)
    linesearch_factor: float = 0.5
    linesearch_max: int = 30

    def __post_init__(self):
        if self.newton_tol <= 0.0:
            raise ConfigError(f"newton_tol must be > 0, got {self.newton_tol}")
        if self.newton_max_iter < 1:
            raise ConfigError("newton_max_iter must be >= 1")
        mus = tuple(self.mu_schedule)
        if any(m <= 0.0 for m in mus) or any(b <= a for a, b in zip(mus[1:], mus[:-1])):
            raise ConfigError("mu_schedule must be positive and strictly decreasing")
        if not 0.0 < self.linesearch_factor < 1.0:
            raise ConfigError("linesearch_factor must be in (0, 1)")


# ---------------------------------------------------------------------------
# Boundary data
# ---------------------------------------------------------------------------


class BoundaryDatum:
    """Continuous datum on the parabolic boundary with a concave modulus.

    Built-in kinds: constant, holder (A*|x-anchor|^gamma + offset, time
    independent), separable_sine (A*exp(-n pi^2 t) prod sin(pi x_k), the
    p = 2 oracle), and custom (callable, with an optional modulus callable).
    """

    def __init__(self, kind: str, fn, modulus_fn, params: dict):
        self.kind = kind
        self._fn = fn
        self._modulus = modulus_fn
        self.params = dict(params)

    @classmethod
    def constant(cls, c: float) -> "BoundaryDatum":
        return cls("constant", lambda x, t: np.full(np.asarray(x).shape[:-1], float(c)),
                   lambda r: 0.0, {"c": c})

    @classmethod
    def holder(cls, gamma: float, amplitude: float = 1.0, anchor=0.0,
               offset: float = 0.0) -> "BoundaryDatum":
        if not 0.0 < gamma <= 1.0:
            raise ConfigError(f"holder exponent must be in (0, 1], got {gamma}")
        anchor_arr = np.atleast_1d(np.asarray(anchor, dtype=float))

        def fn(x, t):
            x = np.asarray(x, dtype=float)
            d = np.sqrt(np.sum((x - anchor_arr) ** 2, axis=-1))
            return amplitude * d ** gamma + offset

        def mod(r):
            return abs(amplitude) * (2.0 * r) ** gamma

        return cls("holder", fn, mod,
                   {"gamma": gamma, "amplitude": amplitude, "anchor": anchor,
                    "offset": offset})

    @classmethod
    def separable_sine(cls, amplitude: float = 1.0, n: int = 1) -> "BoundaryDatum":
        decay = n * math.pi ** 2

        def fn(x, t):
            x = np.asarray(x, dtype=float)
            val = amplitude * math.exp(-decay * t) * np.prod(np.sin(math.pi * x), axis=-1)
            return val

        lip = abs(amplitude) * (math.pi * math.sqrt(n) + decay)

        def mod(r):
            return min(lip * r, 2.0 * abs(amplitude))

        return cls("separable_sine", fn, mod, {"amplitude": amplitude, "n": n})

    @classmethod
    def custom(cls, fn, modulus_fn=None, params=None) -> "BoundaryDatum":
        return cls("custom", fn, modulus_fn, params or {})

    def eval(self, x, t: float):
        return self._fn(x, t)

    def modulus(self, r: float) -> float:
        if self._modulus is None:
            raise ConfigError("custom datum carries no modulus")
        return self._modulus(r)

    def sup_abs_parabolic(self, D: GridDomain) -> float:
        """sup |g| over lateral nodes at all levels and closure nodes at t = 0."""
        coords = D.node_coords
        vals = [np.abs(self.eval(coords[D.in_closure], 0.0))]
        if D.lateral.any():
            lat = coords[D.lateral]
            vals.extend(np.abs(self.eval(lat, t)) for t in D.times)
        return float(max(np.max(v) for v in vals if v.size))


# ---------------------------------------------------------------------------
# Grid functions
# ---------------------------------------------------------------------------


@dataclass
class GridFunction:
    """Nodal space-time field: values[m] is the slice at time level m.

    Values are defined on closure nodes at every level; exterior nodes hold
    NaN and are never read.
    """

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        expected = (self.domain.n_steps + 1,) + self.domain.shape
        if self.values.shape != expected:
            raise InvalidParameterError(
                f"values shape {self.values.shape} != expected {expected}")

    @classmethod
    def from_callable(cls, D: GridDomain, f) -> "GridFunction":
        vals = np.full((D.n_steps + 1,) + D.shape, np.nan)
        coords = D.node_coords
        for m, t in enumerate(D.times):
            slab = np.asarray(f(coords, t), dtype=float)
            vals[m][D.in_closure] = slab[D.in_closure]
        return cls(D, vals)

    def at(self, m: int) -> np.ndarray:
        return self.values[m]

    def u_values(self, beta: BetaMap) -> np.ndarray:
        out = self.values.copy()
        mask = self.domain.in_closure
        for m in range(out.shape[0]):
            out[m][mask] = beta.inverse(out[m][mask])
        return out

    def copy(self) -> "GridFunction":
        return GridFunction(self.domain, self.values.copy())


@dataclass
class StepLog:
    step: int
    t: float
    iters: int
    final_residual: float
    mu_final: float


# ---------------------------------------------------------------------------
# Flux evaluation in the transformed variable
# ---------------------------------------------------------------------------


def _transformed_flux_1d(field: VectorField, beta: BetaMap, x_face, t, w_face, d, mu):
    """Scalar flux of the w-equation at faces: A(x, t, beta^-1(w), d/beta')."""
    if beta.kappa_b == 0.0:
        xi = d
        scale = 1.0
    else:
        u = beta.inverse(w_face)
        scale = 1.0 / beta.deriv(u)
        xi = d * scale
    m = (xi * xi + mu * mu) ** ((field.p - 2.0) / 2.0)
    if field.kind == "p_laplacian_with_coefficient":
        u = beta.inverse(w_face) if beta.kappa_b else w_face
        m = m * field.coefficient(x_face, t, u)
    return m * xi, scale


def transformed_flux_nodal(field: VectorField, beta: BetaMap, coords, t, w, grad, mu=0.0):
    """Vector flux of the w-equation at nodes, for quadrature of weak forms."""
    if beta.kappa_b == 0.0:
        xi = grad
    else:
        u = beta.inverse(w)
        xi = grad / beta.deriv(u)[..., None]
    norm2 = np.sum(xi * xi, axis=-1, keepdims=True)
    m = (norm2 + mu * mu) ** ((field.p - 2.0) / 2.0)
    if field.kind == "p_laplacian_with_coefficient":
        u = beta.inverse(w) if beta.kappa_b else w
        m = m * np.asarray(field.coefficient(coords, t, u))[..., None]
    return m * xi


# ---------------------------------------------------------------------------
# Steppers
# ---------------------------------------------------------------------------


class _Stepper1D:
    def __init__(self, D: GridDomain, P: ModelParams, field: VectorField):
        self.D, self.P, self.field = D, P, field
        self.beta = P.beta
        self.H = P.enthalpy
        self.N = D.shape[0]
        self.interior = np.where(D.interior.ravel())[0]
        self.x = D.node_coords[:, 0]
        self.x_face = 0.5 * (self.x[:-1] + self.x[1:])

    def _faces(self, W, t, mu):
        d = np.diff(W) / self.D.h
        w_face = 0.5 * (W[:-1] + W[1:])
        A, scale = _transformed_flux_1d(self.field, self.beta, self.x_face, t, w_face, d, mu)
        return d, A, scale

    def residual(self, W, rhs_H, t, mu):
        _, A, _ = self._faces(W, t, mu)
        div = (A[1:] - A[:-1]) / self.D.h
        R = self.H(W[1:-1]) - rhs_H - self.D.dt * div
        return R

    def newton_delta(self, W, R, t, mu):
        d, _, scale = self._faces(W, t, mu)
        xi = d * scale
        cond = self.field.flux_deriv_scalar(xi, mu) * scale / self.D.h
        if self.field.kind == "p_laplacian_with_coefficient":
            w_face = 0.5 * (W[:-1] + W[1:])
            u = self.beta.inverse(w_face) if self.beta.kappa_b else w_face
            cond = cond * self.field.coefficient(self.x_face, t, u)
        r = self.D.dt / self.D.h
        diag = self.H.deriv(W[1:-1]) + r * (cond[1:] + cond[:-1])
        lower = -r * cond[1:-1]
        upper = -r * cond[1:-1]
        n = len(diag)
        ab = np.zeros((3, n))
        ab[0, 1:] = upper
        ab[1, :] = diag
        ab[2, :-1] = lower
        return solve_banded((1, 1), ab, -R)

    def apply_delta(self, W, delta, s):
        W2 = W.copy()
        W2[1:-1] += s * delta
        return W2

    def rhs_enthalpy(self, W_prev):
        return self.H(W_prev[1:-1])

    def interior_values(self, W):
        return W[1:-1]


class _Stepper1DPeriodic(_Stepper1D):
    def __init__(self, D, P, field):
        super().__init__(D, P, field)

    def _faces(self, W, t, mu):
        Wx = np.concatenate([W, W[:1]])
        d = np.diff(Wx) / self.D.h
        w_face = 0.5 * (Wx[:-1] + Wx[1:])
        xf = np.concatenate([self.x_face, [self.x[-1] + 0.5 * self.D.h]])
        A, scale = _transformed_flux_1d(self.field, self.beta, xf, t, w_face, d, mu)
        return d, A, scale

    def residual(self, W, rhs_H, t, mu):
        _, A, _ = self._faces(W, t, mu)
        div = (A - np.roll(A, 1)) / self.D.h
        return self.H(W) - rhs_H - self.D.dt * div

    def newton_delta(self, W, R, t, mu):
        d, _, scale = self._faces(W, t, mu)
        xi = d * scale
        cond = self.field.flux_deriv_scalar(xi, mu) * scale / self.D.h
        r = self.D.dt / self.D.h
        N = self.N
        J = np.zeros((N, N))
        diag = self.H.deriv(W) + r * (cond + np.roll(cond, 1))
        np.fill_diagonal(J, diag)
        for i in range(N):
            J[i, (i + 1) % N] -= r * cond[i]
            J[i, (i - 1) % N] -= r * cond[i - 1]
        return np.linalg.solve(J, -R)

    def apply_delta(self, W, delta, s):
        return W + s * delta

    def rhs_enthalpy(self, W_prev):
        return self.H(W_prev)

    def interior_values(self, W):
        return W


class _Stepper2D:
    """5-point conservative scheme; face fluxes use the full gradient
    (transverse component averaged to the face), the Newton matrix keeps only
    the main-direction sensitivity, which is symmetric positive definite."""

    def __init__(self, D: GridDomain, P: ModelParams, field: VectorField):
        self.D, self.P, self.field = D, P, field
        self.beta = P.beta
        self.H = P.enthalpy
        self.closure = D.in_closure
        self.interior_idx = np.where(D.interior.ravel())[0]
        self.flat_to_int = -np.ones(D.shape[0] * D.shape[1], dtype=int)
        self.flat_to_int[self.interior_idx] = np.arange(len(self.interior_idx))
        self.coords = D.node_coords
        self.fx_valid = self.closure[:-1, :] & self.closure[1:, :]
        self.fy_valid = self.closure[:, :-1] & self.closure[:, 1:]

    def _transverse(self, W):
        # central differences of W in each axis, one-sided next to the boundary
        gx = _slice_gradient(self.D, W)
        return gx[0], gx[1]

    def _face_data(self, W, t, mu):
        h = self.D.h
        Wc = np.where(self.closure, W, 0.0)
        gx, gy = self._transverse(np.where(self.closure, W, np.nan))
        gx = np.nan_to_num(gx)
        gy = np.nan_to_num(gy)
        dx = (Wc[1:, :] - Wc[:-1, :]) / h
        ty = 0.5 * (gy[:-1, :] + gy[1:, :])
        dy = (Wc[:, 1:] - Wc[:, :-1]) / h
        tx = 0.5 * (gx[:, :-1] + gx[:, 1:])
        if self.beta.kappa_b == 0.0:
            sx = sy = 1.0
            xix, xiy_t = dx, ty
            yiy, yix_t = dy, tx
        else:
            wfx = 0.5 * (Wc[1:, :] + Wc[:-1, :])
            wfy = 0.5 * (Wc[:, 1:] + Wc[:, :-1])
            sx = 1.0 / self.beta.deriv(self.beta.inverse(wfx))
            sy = 1.0 / self.beta.deriv(self.beta.inverse(wfy))
            xix, xiy_t = dx * sx, ty * sx
            yiy, yix_t = dy * sy, tx * sy
        n2x = xix ** 2 + xiy_t ** 2
        n2y = yiy ** 2 + yix_t ** 2
        pm = (self.field.p - 2.0) / 2.0
        mx = (n2x + mu * mu) ** pm
        my = (n2y + mu * mu) ** pm
        Ax = np.where(self.fx_valid, mx * xix, 0.0)
        Ay = np.where(self.fy_valid, my * yiy, 0.0)
        return dx, dy, Ax, Ay, (xix, xiy_t, n2x, sx), (yiy, yix_t, n2y, sy)

    def residual(self, W, rhs_H, t, mu):
        h = self.D.h
        _, _, Ax, Ay, _, _ = self._face_data(W, t, mu)
        div = np.zeros(self.D.shape)
        div[1:-1, :] += (Ax[1:, :] - Ax[:-1, :]) / h
        div[:, 1:-1] += (Ay[:, 1:] - Ay[:, :-1]) / h
        R_full = self.H(np.where(self.closure, W, 0.0)) - self.D.dt * div
        R = R_full.ravel()[self.interior_idx] - rhs_H
        return R

    def newton_delta(self, W, R, t, mu):
        h = self.D.h
        p = self.field.p
        _, _, _, _, (xix, _, n2x, sx), (yiy, _, n2y, sy) = self._face_data(W, t, mu)
        pm4 = (p - 4.0) / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            cx = (n2x + mu * mu) ** ((p - 2.0) / 2.0)
            cy = (n2y + mu * mu) ** ((p - 2.0) / 2.0)
            if p != 2.0:
                cx = cx + (p - 2.0) * np.where(n2x + mu * mu > 0,
                                               (n2x + mu * mu) ** pm4, 0.0) * xix ** 2
                cy = cy + (p - 2.0) * np.where(n2y + mu * mu > 0,
                                               (n2y + mu * mu) ** pm4, 0.0) * yiy ** 2
        cx = np.where(self.fx_valid, cx * sx / h, 0.0)
        cy = np.where(self.fy_valid, cy * sy / h, 0.0)
        nx, ny = self.D.shape
        r = self.D.dt / h
        n_int = len(self.interior_idx)
        diag = self.H.deriv(W.ravel()[self.interior_idx])
        rows, cols, data = [], [], []
        ii, jj = np.unravel_index(self.interior_idx, (nx, ny))
        for dii, djj, cond in (
            (-1, 0, cx[(ii - 1, jj)]), (1, 0, cx[(ii, jj)]),
            (0, -1, cy[(ii, jj - 1)]), (0, 1, cy[(ii, jj)]),
        ):
            diag = diag + r * cond
            nb_flat = (ii + dii) * ny + (jj + djj)
            nb_int = self.flat_to_int[nb_flat]
            sel = nb_int >= 0
            rows.append(np.arange(n_int)[sel])
            cols.append(nb_int[sel])
            data.append(-r * cond[sel])
        rows.append(np.arange(n_int))
        cols.append(np.arange(n_int))
        data.append(diag)
        J = csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n_int, n_int))
        dinv = 1.0 / J.diagonal()
        M = LinearOperator((n_int, n_int), matvec=lambda v: dinv * v)
        tol = 0.01 * self._newton_tol
        delta, info = cg(J, -R, rtol=0.0, atol=tol, maxiter=2000, M=M)
        return delta

    def apply_delta(self, W, delta, s):
        W2 = W.copy()
        flat = W2.ravel()
        flat[self.interior_idx] += s * delta
        return flat.reshape(self.D.shape)

    def rhs_enthalpy(self, W_prev):
        return self.H(W_prev.ravel()[self.interior_idx])

    def interior_values(self, W):
        return W.ravel()[self.interior_idx]


def _make_stepper(D: GridDomain, P: ModelParams, field: VectorField):
    if D.n == 1:
        return _Stepper1DPeriodic(D, P, field) if D.periodic else _Stepper1D(D, P, field)
    if D.periodic:
        raise ConfigError("periodic mode is 1-D only")
    return _Stepper2D(D, P, field)


def solve_regularized(D: GridDomain, P: ModelParams, g: BoundaryDatum,
                      C: SolveConfig | None = None, field: VectorField | None = None):
    """March the implicit scheme over all time levels.

    Returns (w, logs): w is the transformed solution with Dirichlet nodes
    carrying beta(g) exactly, and logs records Newton iterations, the final
    mu = 0 residual and the last regularization stage per step.
    """
    C = C or SolveConfig()
    field = field or P.flux_field
    stepper = _make_stepper(D, P, field)
    stepper._newton_tol = C.newton_tol
    beta = P.beta
    coords = D.node_coords

    vals = np.full((D.n_steps + 1,) + D.shape, np.nan)
    closure = D.in_closure
    vals[0][closure] = beta(g.eval(coords[closure], 0.0))

    gsup = g.sup_abs_parabolic(D)
    box = beta.lam * (gsup + 1.0)

    # p = 2 flux does not depend on mu; a single exact stage suffices
    if P.p == 2.0:
        stages = [(0.0, 0.0)]
    else:
        stages = [(mu, mu) for mu in C.mu_schedule] + [(0.0, C.mu_schedule[-1])]

    logs = []
    for m in range(D.n_steps):
        t_new = D.times[m + 1]
        W = vals[m].copy()
        if D.lateral.any():
            W[D.lateral] = beta(g.eval(coords[D.lateral], t_new))
        rhs_H = stepper.rhs_enthalpy(vals[m])
        iters_total = 0
        mu_final = stages[-1][1]
        for res_mu, jac_mu in stages:
            R = stepper.residual(W, rhs_H, t_new, res_mu)
            norm = float(np.max(np.abs(R)))
            it = 0
            while norm > C.newton_tol and it < C.newton_max_iter:
                delta = stepper.newton_delta(W, R, t_new, jac_mu)
                s = 1.0
                accepted = False
                for _ in range(C.linesearch_max):
                    W_try = stepper.apply_delta(W, delta, s)
                    inside = np.max(np.abs(stepper.interior_values(W_try))) <= box
                    if inside:
                        R_try = stepper.residual(W_try, rhs_H, t_new, res_mu)
                        norm_try = float(np.max(np.abs(R_try)))
                        if norm_try <= (1.0 - 1e-4 * s) * norm:
                            W, R, norm = W_try, R_try, norm_try
                            accepted = True
                            break
                    s *= C.linesearch_factor
                if not accepted:
                    break
                it += 1
            iters_total += it
        R0 = stepper.residual(W, rhs_H, t_new, 0.0)
        res0 = float(np.max(np.abs(R0)))
        if res0 > C.newton_tol:
            raise SolverError(m + 1, t_new, res0)
        vals[m + 1] = W
        vals[m + 1][D.exterior] = np.nan
        logs.append(StepLog(step=m + 1, t=t_new, iters=iters_total,
                            final_residual=res0, mu_final=mu_final))
    return GridFunction(D, vals), logs


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@dataclass
class MaxPrincipleResult:
    passed: bool
    margin: float
    sup_interior: float
    sup_boundary: float


def max_principle_check(w: GridFunction, g: BoundaryDatum, beta: BetaMap,
                        newton_tol: float = 1e-10) -> MaxPrincipleResult:
    """sup |beta^-1(w)| over the cylinder against sup |g| on its parabolic boundary.

    margin = sup_boundary - sup_interior; passes when margin >= -10*newton_tol.
    """
    D = w.domain
    sup_bd = g.sup_abs_parabolic(D)
    u = w.u_values(beta)
    sup_int = float(np.nanmax(np.abs(u)))
    margin = sup_bd - sup_int
    return MaxPrincipleResult(passed=margin >= -10.0 * newton_tol, margin=margin,
                              sup_interior=sup_int, sup_boundary=sup_bd)


def _slice_gradient(D: GridDomain, slab: np.ndarray) -> np.ndarray:
    """Nodal gradient of one time slice: central inside, one-sided next to the
    boundary, NaN on exterior nodes.  Returns shape (n, *D.shape)."""
    h = D.h
    closure = D.in_closure
    out = np.full((D.n, *D.shape), np.nan)
    vals = np.where(closure, slab, np.nan)
    for ax in range(D.n):
        v = np.moveaxis(vals, ax, 0)
        ok = np.moveaxis(closure, ax, 0)
        g = np.full_like(v, np.nan)
        up = np.roll(v, -1, axis=0)
        dn = np.roll(v, 1, axis=0)
        up_ok = np.roll(ok, -1, axis=0).copy()
        dn_ok = np.roll(ok, 1, axis=0).copy()
        up_ok[-1] = False
        dn_ok[0] = False
        up[-1] = np.nan
        dn[0] = np.nan
        both = ok & up_ok & dn_ok
        fwd = ok & up_ok & ~dn_ok
        bwd = ok & dn_ok & ~up_ok
        g[both] = (up[both] - dn[both]) / (2.0 * h)
        g[fwd] = (up[fwd] - v[fwd]) / h
        g[bwd] = (v[bwd] - dn[bwd]) / h
        g[ok & ~up_ok & ~dn_ok] = 0.0
        out[ax] = np.moveaxis(g, 0, ax)
    return out


def gradient_field(w: GridFunction, level: int) -> np.ndarray:
    """Discrete spatial gradient at one time level; exterior stays NaN."""
    if not 0 <= level <= w.domain.n_steps:
        raise InvalidParameterError(f"level {level} out of range")
    return _slice_gradient(w.domain, w.values[level])


# ---------------------------------------------------------------------------
# Smooth compactly supported test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceTimeBump:
    """(1 - |x-c|^2/r^2)_+^k times an optional time profile of the same form.

    k >= 2 gives a C^1 function with analytic space and time derivatives;
    with t_center = None the bump is constant in time.
    """

    center: tuple
    radius: float
    t_center: float | None = None
    t_halfwidth: float | None = None
    k: int = 3

    def _space(self, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center, dtype=float)
        s = np.sum((x - c) ** 2, axis=-1) / self.radius ** 2
        return np.maximum(1.0 - s, 0.0), s, x - c

    def _time(self, t):
        if self.t_center is None:
            return 1.0, 0.0
        y = (t - self.t_center) / self.t_halfwidth
        base = max(1.0 - y * y, 0.0)
        val = base ** self.k
        dval = -2.0 * self.k * y / self.t_halfwidth * base ** (self.k - 1)
        return val, dval

    def value(self, x, t):
        base, _, _ = self._space(x)
        tv, _ = self._time(t)
        return base ** self.k * tv

    def dt(self, x, t):
        base, _, _ = self._space(x)
        _, dtv = self._time(t)
        return base ** self.k * dtv

    def grad(self, x, t):
        base, _, xc = self._space(x)
        tv, _ = self._time(t)
        fac = -2.0 * self.k / self.radius ** 2 * base ** (self.k - 1) * tv
        return fac[..., None] * xc


def weak_residual(w: GridFunction, P: ModelParams, phi, window, K,
                  field: VectorField | None = None) -> float:
    """Discrete weak-form defect of the enthalpy equation on K x window.

    Computes the boundary pairing at the window ends plus the interior terms
    -v dphi/dt + <A, Dphi> with v = w + H(w), using midpoint values in time
    for the fields and the exact per-step increment of phi for the parabolic
    term (so constants cancel to rounding).  phi must vanish outside the ball
    K = (center, radius), which must lie inside the domain.
    """
    D = w.domain
    field = field or P.flux_field
    beta, H = P.beta, P.heaviside
    t1, t2 = window
    if not (0.0 < t1 < t2 <= D.T):
        raise InvalidParameterError(f"window {window} not inside (0, T]")
    m1, m2 = D.time_level_of(t1), D.time_level_of(t2)

    center, radius = K
    kmask = D.ball_mask(center, radius)
    if not bool(np.all(D.in_closure[kmask])):
        raise SupportError("inner region K leaves the domain closure")
    outside = ~kmask & D.in_closure
    coords = D.node_coords
    if np.any(outside):
        sup_out = float(np.max(np.abs(phi.value(coords[outside], 0.5 * (t1 + t2)))))
        if sup_out > 1e-12:
            raise SupportError(f"test function not supported in K (|phi| = {sup_out:.2e} outside)")

    hn = D.h ** D.n
    mask = kmask & D.in_closure
    pts = coords[mask]

    def v_of(m):
        slab = w.values[m][mask]
        return slab + H(slab)

    total = float(np.sum(v_of(m2) * phi.value(pts, D.times[m2])) -
                  np.sum(v_of(m1) * phi.value(pts, D.times[m1]))) * hn

    for m in range(m1, m2):
        ta, tb = D.times[m], D.times[m + 1]
        tm = 0.5 * (ta + tb)
        v_mid = 0.5 * (v_of(m) + v_of(m + 1))
        dphi = phi.value(pts, tb) - phi.value(pts, ta)
        total -= float(np.sum(v_mid * dphi)) * hn
        w_mid_full = 0.5 * (w.values[m] + w.values[m + 1])
        grad = _slice_gradient(D, w_mid_full)
        gsel = np.stack([grad[ax][mask] for ax in range(D.n)], axis=-1)
        A = transformed_flux_nodal(field, beta, pts, tm, w_mid_full[mask], gsel)
        total += float(np.sum(A * phi.grad(pts, tm))) * hn * D.dt
    return total
