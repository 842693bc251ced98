"""Empirical checkers for the boundary estimates on discrete solutions.

Every unquantified ``<= c * RHS`` estimate is tested as a two-part criterion:
the fitted constant LHS/RHS must be finite, and it must be stable under grid
refinement (the stability comparison is the caller's job, across runs).
Checkers abstain (UNDECIDED) when a cylinder's grid intersection carries
fewer than 8 nodes, instead of passing vacuously.

Discrete conventions: spatial averages over a region of the open domain
count interior nodes; suprema in time are maxima over the grid levels of the
window, with closed levels at both ends.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import GridDomain, InvalidParameterError, ModelParams, MollifiedHeaviside
from .geometry import Cylinder, Cutoff, oscillation, rescale_solution, time_scales, t4
from .iteration import ExponentPack, IterationState, build_sequences
from .solver import BoundaryDatum, GridFunction, _slice_gradient

MIN_NODES = 8

NO_JUMP = "NO_JUMP"
ALT1 = "ALT1"
ALT2_1 = "ALT2_1"
ALT2_2 = "ALT2_2"


class LevelError(ValueError):
    """Truncation level below the boundary datum on the cylinder."""


class OscillationHypothesisError(ValueError):
    """Measured oscillation exceeds the hypothesis of the estimate."""


class AlternativeMismatchError(ValueError):
    """Density estimate requested under the wrong alternative tag."""


class GapError(ValueError):
    """Initial-datum gap precondition of the logarithmic estimate fails."""


@dataclass
class InequalityReport:
    name: str
    lhs: float
    rhs_terms: dict
    fitted_constant: float
    passed: object          # True / False / None (None = UNDECIDED)
    details: dict = field(default_factory=dict)

    @property
    def undecided(self) -> bool:
        return self.passed is None

    @property
    def rhs_total(self) -> float:
        return float(sum(self.rhs_terms.values()))

    def csv_row(self) -> dict:
        status = "UNDECIDED" if self.undecided else ("pass" if self.passed else "fail")
        return {"name": self.name, "lhs": repr(self.lhs), "rhs": repr(self.rhs_total),
                "fitted_c": repr(self.fitted_constant), "status": status}

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "lhs": self.lhs, "rhs_terms": self.rhs_terms,
            "fitted_constant": self.fitted_constant,
            "status": self.csv_row()["status"], "details": self.details,
        }, sort_keys=True)


@dataclass
class AlternativeTag:
    tag: str
    witnesses: dict

    def __post_init__(self):
        if self.tag not in (NO_JUMP, ALT1, ALT2_1, ALT2_2):
            raise InvalidParameterError(f"unknown alternative tag {self.tag!r}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

_GL16 = np.polynomial.legendre.leggauss(16)


def _jump_moment(H: MollifiedHeaviside, v: np.ndarray, k: float) -> np.ndarray:
    """int_k^v H'(xi) (xi - k)_+ dxi, vanishing unless v exceeds both k and the
    lower edge of the ramp support."""
    v = np.asarray(v, dtype=float)
    lo = max(k, H.a - H.eps)
    hi = np.minimum(v, H.a + H.eps)
    width = np.maximum(hi - lo, 0.0)
    nodes, weights = _GL16
    xi = lo + width[..., None] * (nodes + 1.0) / 2.0
    integ = H.deriv(xi) * np.maximum(xi - k, 0.0)
    return (width / 2.0) * np.sum(weights * integ, axis=-1)


def _region_masks(w: GridFunction, Q: Cylinder):
    D = w.domain
    ball = D.ball_mask(Q.x0, Q.r)
    interior = ball & D.interior
    closure = ball & D.in_closure
    levels = Q.time_levels(D)
    return interior, closure, levels


def _boundary_sup(w: GridFunction, Q: Cylinder) -> float:
    """sup of the (datum-valued) solution over closure(Q) cap parabolic boundary."""
    D = w.domain
    ball = D.ball_mask(Q.x0, Q.r)
    levels = Q.time_levels(D)
    sup = -math.inf
    lat = ball & D.lateral
    if lat.any() and len(levels):
        sup = max(sup, float(np.max(w.values[levels][:, lat])))
    if len(levels) and levels[0] == 0:
        ini = ball & D.in_closure
        if ini.any():
            sup = max(sup, float(np.max(w.values[0][ini])))
    return sup


def _boundary_osc(w: GridFunction, Q: Cylinder) -> float:
    D = w.domain
    ball = D.ball_mask(Q.x0, Q.r)
    levels = Q.time_levels(D)
    vals = []
    lat = ball & D.lateral
    if lat.any() and len(levels):
        vals.append(w.values[levels][:, lat].ravel())
    if len(levels) and levels[0] == 0:
        ini = ball & D.in_closure
        if ini.any():
            vals.append(w.values[0][ini].ravel())
    if not vals:
        return 0.0
    allv = np.concatenate(vals)
    return float(np.max(allv) - np.min(allv))


# ---------------------------------------------------------------------------
# Caccioppoli
# ---------------------------------------------------------------------------


def caccioppoli_check(w: GridFunction, Q: Cylinder, k: float, phi: Cutoff,
                      H: MollifiedHeaviside, p: float) -> InequalityReport:
    """Boundary energy inequality at level k with cutoff phi.

    LHS: the two sup-in-time averages (jump moment and square of the
    truncation, both against phi^p) plus the truncated gradient energy;
    RHS: the constant-free cutoff terms.  The fitted constant is LHS/RHS.
    Raises when k does not dominate the boundary datum on the cylinder.
    """
    D = w.domain
    sup_g = _boundary_sup(w, Q)
    if k <= sup_g:
        raise LevelError(f"level k = {k} below boundary datum sup = {sup_g}")
    interior, _, levels = _region_masks(w, Q)
    n_nodes = int(np.count_nonzero(interior)) * len(levels)
    coords = D.node_coords
    pts = coords[interior]
    gamma_len = min(Q.t_hi, D.T) - max(Q.t_lo, 0.0)

    sup_T_jump = 0.0
    sup_T_sq = 0.0
    grad_energy = []
    rhs_grad = []
    rhs_dt = []
    rhs_jump_dt = []
    for m in levels:
        t = D.times[m]
        slab = w.values[m]
        vk = np.maximum(slab - k, 0.0)
        phiv = phi.value(pts, t)
        jm = _jump_moment(H, slab[interior], k)
        sup_T_jump = max(sup_T_jump, float(np.mean(jm * phiv ** p)) / gamma_len)
        sup_T_sq = max(sup_T_sq, float(np.mean(vk[interior] ** 2 * phiv ** p)) / gamma_len)
        gr = _slice_gradient(D, np.where(D.in_closure, vk, np.nan))
        gnorm = np.sqrt(np.sum(np.stack([gr[ax][interior] for ax in range(D.n)],
                                        axis=-1) ** 2, axis=-1))
        grad_energy.append(np.mean(gnorm ** p * phiv ** p))
        dphi = np.sqrt(np.sum(phi.grad(pts, t) ** 2, axis=-1))
        dtp = np.maximum(phi.dt_pow_p(pts, t), 0.0)
        rhs_grad.append(np.mean(vk[interior] ** p * dphi ** p))
        rhs_dt.append(np.mean(vk[interior] ** 2 * dtp))
        rhs_jump_dt.append(np.mean(jm * dtp))

    lhs_terms = {
        "sup_jump_moment": sup_T_jump,
        "sup_square": sup_T_sq,
        "gradient_energy": float(np.mean(grad_energy)),
    }
    rhs_terms = {
        "cutoff_gradient": float(np.mean(rhs_grad)),
        "cutoff_dt": float(np.mean(rhs_dt)),
        "jump_cutoff_dt": float(np.mean(rhs_jump_dt)),
    }
    lhs = float(sum(lhs_terms.values()))
    rhs = float(sum(rhs_terms.values()))
    if n_nodes < MIN_NODES:
        passed = None
        fitted = math.nan
    elif rhs == 0.0:
        fitted = 0.0 if lhs == 0.0 else math.inf
        passed = lhs == 0.0
    else:
        fitted = lhs / rhs
        passed = math.isfinite(fitted)
    return InequalityReport("caccioppoli", lhs, rhs_terms, fitted, passed,
                            details={"lhs_terms": lhs_terms, "k": k,
                                     "nodes": n_nodes})


# ---------------------------------------------------------------------------
# Alternatives
# ---------------------------------------------------------------------------


def classify_alternative(w: GridFunction, Q3: Cylinder, P: ModelParams,
                         omega: float, tilde_omega: float | None = None) -> AlternativeTag:
    """Decide which oscillation-reduction alternative the solution is in.

    NO_JUMP when the jump value is outside [inf, sup] over Q3; ALT1 when the
    jump sits at least 2*tilde below the supremum; otherwise the near-jump
    occupation average decides between ALT2_1 (high) and ALT2_2 (low) against
    the threshold eps3^-1 (eps1*omega)^q.  tilde_omega may be passed
    explicitly (the rescaling invariance scales it linearly); by default it
    is computed from omega via the configured eps1.
    """
    D = w.domain
    scales = time_scales(omega, Q3.r, P)
    to = scales.tilde_omega if tilde_omega is None else tilde_omega
    _, closure, levels = _region_masks(w, Q3)
    if not closure.any() or len(levels) == 0:
        raise InvalidParameterError("Q3 misses the grid")
    vals = w.values[levels][:, closure]
    mu_plus = float(np.max(vals))
    mu_minus = float(np.min(vals))
    osc = mu_plus - mu_minus
    if osc > omega + 1e-12:
        raise OscillationHypothesisError(
            f"oscillation hypothesis fails: measured osc = {osc} > omega = {omega}")
    eps_admissible = P.eps <= to / 2.0
    b = P.a
    wit = {"mu_plus": mu_plus, "mu_minus": mu_minus, "b": b, "tilde_omega": to,
           "eps_admissible": eps_admissible, "osc": osc}
    if not (mu_minus <= b <= mu_plus):
        return AlternativeTag(NO_JUMP, wit)
    if b <= mu_plus - 2.0 * to:
        return AlternativeTag(ALT1, wit)
    # near-supremum jump: measure the occupation average on the Alt window
    H = MollifiedHeaviside(b, P.eps)
    t_lo = max(0.0, Q3.t0 - scales.T1 / 4.0)
    win = Cylinder(Q3.x0, Q3.t0, Q3.r / 4.0, t_lo, Q3.t0, kind="backward")
    interior, _, wlevels = _region_masks(w, win)
    if not interior.any() or len(wlevels) == 0:
        raise InvalidParameterError("Alt window misses the grid")
    level_lo = mu_plus - 3.0 * to
    S = -math.inf
    for m in wlevels:
        slab = w.values[m][interior]
        S = max(S, float(np.mean(H(slab) - H(level_lo))))
    threshold = (P.eps1 * omega) ** P.q / P.eps3
    wit.update({"occupation_sup": S, "threshold": threshold})
    return AlternativeTag(ALT2_1 if S > threshold else ALT2_2, wit)


def density_estimates(w: GridFunction, Q1: Cylinder, Q2: Cylinder, Q3: Cylinder,
                      P: ModelParams, omega: float, tag: AlternativeTag,
                      tilde_omega: float | None = None) -> list:
    """Level-set volume fractions against the three closed-form shapes.

    ALT1 drives the away-from-jump estimate on Q2/8; ALT2 drives the crude
    estimate on Q3/2; ALT2_2 additionally drives the refined estimate on
    Q1/8.  Requesting estimates under a mismatched tag raises.
    """
    if tag.tag == NO_JUMP:
        raise AlternativeMismatchError("no density estimate applies without a met jump")
    scales = time_scales(omega, Q3.r, P)
    to = scales.tilde_omega if tilde_omega is None else tilde_omega
    _, closure, levels = _region_masks(w, Q3)
    mu_plus = float(np.max(w.values[levels][:, closure]))
    p_prime = P.p_prime

    wanted = {ALT1: ["lat_dens_3"], ALT2_1: ["lat_dens_2"],
              ALT2_2: ["lat_dens_2", "lat_dens_1"]}[tag.tag]
    spec_map = {
        "lat_dens_3": (Q2.scaled(1.0 / 8.0), mu_plus - 2.0 * P.eps2 * to,
                       1.0 / math.log(1.0 / P.eps2) ** (1.0 / p_prime)),
        "lat_dens_2": (Q3.scaled(0.5), mu_plus - 8.0 * to,
                       (P.eps1 * omega) ** P.q),
        "lat_dens_1": (Q1.scaled(1.0 / 8.0), mu_plus - 2.0 * P.eps1 * omega,
                       P.eps3 ** (-1.0 / P.p) / math.log(1.0 / P.eps1) ** (1.0 / p_prime)),
    }
    out = []
    for name in wanted:
        cyl, level, shape = spec_map[name]
        interior, _, lv = _region_masks(w, cyl)
        n_space = int(np.count_nonzero(interior))
        n_total = n_space * len(lv)
        if n_total == 0:
            out.append(InequalityReport(name, math.nan, {"shape": shape}, math.nan,
                                        None, details={"nodes": 0}))
            continue
        above = int(np.count_nonzero(w.values[lv][:, interior] > level))
        fraction = above / n_total
        fitted = fraction / shape
        passed = None if n_total < MIN_NODES else (0.0 <= fraction <= 1.0
                                                   and math.isfinite(fitted))
        out.append(InequalityReport(
            name, fraction, {"shape": shape}, fitted, passed,
            details={"level": level, "nodes": n_total, "mu_plus": mu_plus,
                     "tilde_omega": to}))
    return out


# ---------------------------------------------------------------------------
# Logarithmic estimate at the initial boundary
# ---------------------------------------------------------------------------


def log_lemma_check(w: GridFunction, x0, r: float, omega: float, P: ModelParams,
                    theta_list) -> InequalityReport:
    """Occupation fractions of the near-supremum level sets on (0, T4).

    For each theta and each grid time in (0, T4), measures
    |{v(., tau) >= sup_Q v - theta*omega/8}| / |B_{r/2} cap Omega| and fits
    the constant in the c/log(1/theta) bound; reports the worst fit.
    """
    D = w.domain
    T4 = t4(omega, r, P.p, D.T)
    m4 = max(int(math.floor(T4 / D.dt + 1e-9)), 0)
    ball = D.ball_mask(x0, r) & D.interior
    half = D.ball_mask(x0, r / 2.0) & D.interior
    if not ball.any() or m4 < 1:
        return InequalityReport("log_lemma", math.nan, {}, math.nan, None,
                                details={"nodes": 0})
    sup_Q = float(np.max(w.values[:m4 + 1][:, ball]))
    sup_ini = float(np.max(w.values[0][ball]))
    if sup_ini > sup_Q - omega / 8.0 + 1e-14:
        raise GapError(
            f"initial gap fails: sup v(.,0) = {sup_ini} > sup_Q - omega/8 = "
            f"{sup_Q - omega / 8.0}")
    n_half = int(np.count_nonzero(half))
    fits = []
    table = []
    for theta in theta_list:
        if not 0.0 < theta < 1.0:
            raise InvalidParameterError(f"theta must be in (0, 1), got {theta}")
        level = sup_Q - theta * omega / 8.0
        for m in range(1, m4 + 1):
            frac = float(np.count_nonzero(w.values[m][half] >= level)) / n_half
            fit = frac * math.log(1.0 / theta)
            fits.append(fit)
            table.append({"theta": theta, "t": D.times[m], "fraction": frac})
    worst = float(max(fits))
    passed = None if n_half < MIN_NODES else math.isfinite(worst)
    return InequalityReport("log_lemma", worst, {"bound_shape": 1.0}, worst, passed,
                            details={"sup_Q": sup_Q, "T4": T4, "n_half": n_half,
                                     "table_len": len(table)})


# ---------------------------------------------------------------------------
# Oscillation cascade
# ---------------------------------------------------------------------------


@dataclass
class CascadeRow:
    j: int
    R: float
    nodes_inner: int
    osc_outer: float
    osc_inner: float
    omega_next: float
    datum_osc: float
    bound: float
    claim_ok: bool
    eps_admissible: bool
    decided: bool


@dataclass
class CascadeReport:
    lam: float
    rows: list
    fitted_c: float
    radii_table: list
    state: IterationState

    @property
    def all_claims_hold(self) -> bool:
        return all(r.claim_ok for r in self.rows)


def oscillation_cascade(w: GridFunction, x0, t0: float, P: ModelParams,
                        E: ExponentPack, g: BoundaryDatum, J: int) -> CascadeReport:
    """Iterated oscillation bound at a boundary point, plus the endpoint fit.

    Normalizes by lam = max(osc over the base cylinder, 1) through the scaling
    transform, then checks osc over each inner cylinder against
    max(omega_{j+1}, 2 * datum oscillation) along the configured sequences.
    The endpoint table fits the constant of osc(Q_r) <= c*omega(r) on a dyadic
    radius ladder of the original (untransformed) solution.
    """
    from .geometry import intrinsic_cylinder_sequence

    D = w.domain
    state = build_sequences(P, E, J)
    cylinders, _ = intrinsic_cylinder_sequence(x0, t0, state, D)
    try:
        osc0 = oscillation(w, cylinders[0])
    except Exception as exc:
        raise InvalidParameterError(f"base cylinder misses the grid: {exc}")
    lam = max(osc0, 1.0)
    w_hat, P_hat = rescale_solution(w, lam, t0, P)

    rows = []
    for j in range(len(cylinders) - 1):
        Qj, Qj1 = cylinders[j], cylinders[j + 1]
        n_inner = Qj1.node_count(D)
        if n_inner == 0:
            break
        osc_outer = oscillation(w_hat, Qj)
        osc_inner = oscillation(w_hat, Qj1)
        datum_osc = _boundary_osc(w_hat, Qj)
        omega_next = float(state.omega[j + 1])
        bound = max(omega_next, 2.0 * datum_osc)
        to_j = float(state.tilde_omega[j])
        rows.append(CascadeRow(
            j=j, R=float(state.R[j]), nodes_inner=n_inner,
            osc_outer=osc_outer, osc_inner=osc_inner, omega_next=omega_next,
            datum_osc=datum_osc, bound=bound,
            claim_ok=bool(osc_inner <= bound + 1e-12),
            eps_admissible=bool(P_hat.eps <= to_j / 2.0),
            decided=n_inner >= MIN_NODES,
        ))

    u = GridFunction(D, w.u_values(P.beta))
    radii_table = []
    fitted = 0.0
    r = P.R0
    while r >= 2.0 * D.h:
        Q = Cylinder.symmetric(x0, t0, r, P.p)
        try:
            osc_r = oscillation(u, Q)
        except Exception:
            break
        om = state.omega_of(r)
        radii_table.append({"r": r, "osc": osc_r, "omega": om, "c": osc_r / om})
        fitted = max(fitted, osc_r / om)
        r /= 2.0
    return CascadeReport(lam=lam, rows=rows, fitted_c=fitted,
                         radii_table=radii_table, state=state)


# ---------------------------------------------------------------------------
# Parabolic Sobolev inequality
# ---------------------------------------------------------------------------


def sobolev_check(w: GridFunction, phi, B, Gamma, E: ExponentPack) -> InequalityReport:
    """Both sides of the slice-wise parabolic Sobolev inequality by quadrature.

    B = (center, radius), Gamma = (t_lo, t_hi) on grid levels.  The field must
    be nonnegative (it stands for a truncation).  kappa = infinity enters only
    through 1/kappa = 0; the formula is evaluated verbatim under that
    convention.
    """
    D = w.domain
    center, radius = B
    t_lo, t_hi = Gamma
    m_lo, m_hi = D.time_level_of(t_lo), D.time_level_of(t_hi)
    if m_hi <= m_lo:
        raise InvalidParameterError("Gamma must contain at least one step")
    ball = D.ball_mask(center, radius) & D.interior
    n_space = int(np.count_nonzero(ball))
    if n_space == 0:
        return InequalityReport("sobolev", math.nan, {}, math.nan, None,
                                details={"nodes": 0})
    ik = E.inv_kappa
    p = E.p
    pts = D.node_coords[ball]
    exp_w = 2.0 * (1.0 - ik) + p
    exp_phi = p * (2.0 - ik)
    gamma_len = t_hi - t_lo
    levels = range(m_lo, m_hi + 1)

    lhs_vals, sup_slice, grad_vals = [], 0.0, []
    for m in levels:
        t = D.times[m]
        slab = w.values[m]
        if np.nanmin(slab[ball]) < -1e-12:
            raise InvalidParameterError("sobolev_check expects a nonnegative field")
        phiv = phi.value(pts, t)
        lhs_vals.append(np.mean(slab[ball] ** exp_w * phiv ** exp_phi))
        sup_slice = max(sup_slice, float(np.mean(slab[ball] ** 2 * phiv ** p)))
        prod = np.where(D.in_closure, slab, np.nan).copy()
        phi_full = phi.value(D.node_coords, t)
        prod = prod * phi_full
        gr = _slice_gradient(D, prod)
        gnorm2 = np.sum(np.stack([gr[ax][ball] for ax in range(D.n)], axis=-1) ** 2,
                        axis=-1)
        grad_vals.append(np.mean(gnorm2 ** (p / 2.0)))

    lhs = float(np.mean(lhs_vals))
    measure_B = n_space * D.h ** D.n
    rhs_shape = (measure_B ** (p / D.n) * gamma_len ** (1.0 - ik)
                 * (sup_slice / gamma_len) ** (1.0 - ik) * float(np.mean(grad_vals)))
    if rhs_shape == 0.0:
        fitted = 0.0 if lhs == 0.0 else math.inf
        passed = lhs == 0.0
    else:
        fitted = lhs / rhs_shape
        passed = math.isfinite(fitted)
    if n_space * len(list(levels)) < MIN_NODES:
        passed = None
    return InequalityReport("sobolev", lhs, {"shape": rhs_shape}, fitted, passed,
                            details={"inv_kappa": ik, "nodes": n_space})
