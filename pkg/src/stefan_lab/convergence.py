"""Vanishing-regularization sweeps and limit-passage diagnostics.

A sweep re-solves the same problem for a decreasing list of regularization
widths (same grid, datum, and solver config throughout) and post-processes
the family: uniform Cauchy distances, an eps-independent modulus check,
gradient convergence in measure away from the jump, the near-jump gradient
energy bound, and the term-by-term sizes of the weak formulation.

The sweep is gated by resolvability: widths below 2*h*Lip(beta) cannot be
seen by the grid and are rejected up front.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import GridDomain, InvalidParameterError, ModelParams
from .iteration import ExponentPack, RootBracketError, anchor_log_lambda0, h_of_eps, modulus
from .solver import (
    BoundaryDatum,
    GridFunction,
    SolveConfig,
    SupportError,
    _slice_gradient,
    max_principle_check,
    solve_regularized,
    transformed_flux_nodal,
)


class SweepGateError(ValueError):
    """Requested width below the grid-resolvable minimum."""

    def __init__(self, eps: float, minimum: float):
        super().__init__(
            f"eps = {eps} below the resolvable minimum 2*h*Lip(beta) = {minimum:.6g}")
        self.eps = eps
        self.minimum = minimum


def truncate(s, varsigma: float):
    """Two-sided truncation at height varsigma: s clipped to [-varsigma, varsigma]."""
    if varsigma < 0.0:
        raise InvalidParameterError("truncation height must be >= 0")
    return np.minimum(np.maximum(s, -varsigma), varsigma)


@dataclass
class SweepResult:
    eps_list: list
    params: ModelParams
    datum: BoundaryDatum
    solutions: list
    logs: list
    distances: np.ndarray       # distances[i, j] = sup |u_i - u_j|
    margins: list
    newton_tol: float

    @property
    def consecutive_distances(self) -> list:
        return [float(self.distances[i, i + 1]) for i in range(len(self.eps_list) - 1)]

    @property
    def cauchy_trend_ok(self) -> bool:
        d = self.consecutive_distances
        return all(d[i + 1] <= d[i] + 1e-14 for i in range(len(d) - 1))


def run_sweep(D: GridDomain, P: ModelParams, g: BoundaryDatum, eps_list,
              C: SolveConfig | None = None, workers: int = 1) -> SweepResult:
    """Solve once per width and record pairwise uniform distances.

    eps_list must be strictly decreasing and every width must pass the
    resolvability gate.  Runs share grid, datum and solver configuration;
    results are collected in list order, so the output is deterministic for
    any worker count.
    """
    C = C or SolveConfig()
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InvalidParameterError("eps_list must be strictly decreasing")
    minimum = 2.0 * D.h * P.beta.lipschitz
    for e in eps_list:
        if e < minimum:
            raise SweepGateError(e, minimum)

    def one(eps: float):
        Pi = replace(P, eps=eps)
        return solve_regularized(D, Pi, g, C)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, eps_list))
    else:
        results = [one(e) for e in eps_list]
    solutions = [r[0] for r in results]
    logs = [r[1] for r in results]

    n = len(eps_list)
    dist = np.zeros((n, n))
    us = [s.u_values(P.beta) for s in solutions]
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.nanmax(np.abs(us[i] - us[j])))
            dist[i, j] = dist[j, i] = d
    margins = [max_principle_check(s, g, P.beta, C.newton_tol) for s in solutions]
    return SweepResult(eps_list=eps_list, params=P, datum=g, solutions=solutions,
                       logs=logs, distances=dist, margins=margins,
                       newton_tol=C.newton_tol)


# ---------------------------------------------------------------------------
# eps-independent modulus
# ---------------------------------------------------------------------------


@dataclass
class EquiModulusReport:
    c0: float
    violations: list            # per eps beyond the coarsest
    h_values: list
    h_capped: list
    pairs: int

    @property
    def passed(self) -> bool:
        return all(v == 0 for v in self.violations)


def equi_modulus_check(S: SweepResult, E: ExponentPack, n_pairs: int = 2000,
                       seed: int = 0, fit_slack: float = 1e-9) -> EquiModulusReport:
    """Uniform-continuity envelope with an eps-independent shape.

    The envelope is 4*c0*(omega_1(sqrt r) + omega_g(sqrt r)) + h(eps), with
    omega_1 the anchored log-log modulus at unit base radius; c0 is fitted on
    the coarsest width and then frozen, and the finer widths are checked
    against the frozen envelope.  Widths too large for the error map h are
    capped at its bracket maximum and flagged.
    """
    P = S.params
    D = S.solutions[0].domain
    rng = np.random.default_rng(seed)
    log_lam0 = anchor_log_lambda0(P.theta, E.alpha)

    idx = np.argwhere(D.in_closure)
    coords = D.node_coords
    n_levels = D.n_steps + 1
    picks = rng.integers(0, len(idx), size=(n_pairs, 2))
    lev = rng.integers(0, n_levels, size=(n_pairs, 2))

    def envelope_shape(rdist: np.ndarray) -> np.ndarray:
        out = np.empty_like(rdist)
        for i, rr in enumerate(rdist):
            s = min(math.sqrt(rr), 1.0)
            om1 = modulus(s, 1.0, P.theta, E.alpha, log_lambda0=log_lam0) if s > 0 else 0.0
            out[i] = om1 + S.datum.modulus(math.sqrt(rr))
        return out

    pts_a = coords[tuple(idx[picks[:, 0]].T)]
    pts_b = coords[tuple(idx[picks[:, 1]].T)]
    t_a = D.times[lev[:, 0]]
    t_b = D.times[lev[:, 1]]
    rdist = np.sqrt(np.sum((pts_a - pts_b) ** 2, axis=-1) + (t_a - t_b) ** 2)
    keep = rdist > 0
    shape = envelope_shape(rdist[keep])

    h_values, h_capped = [], []
    for e in S.eps_list:
        try:
            h_values.append(float(h_of_eps(e, P.tau, E.alpha)))
            h_capped.append(False)
        except RootBracketError:
            h_values.append(1.0 / P.tau)
            h_capped.append(True)

    def deltas(u):
        vals_a = u[(lev[:, 0],) + tuple(idx[picks[:, 0]].T)]
        vals_b = u[(lev[:, 1],) + tuple(idx[picks[:, 1]].T)]
        return np.abs(vals_a - vals_b)[keep]

    us = [s.u_values(P.beta) for s in S.solutions]
    d0 = deltas(us[0])
    c0 = float(np.max(np.maximum(d0 - h_values[0], 0.0) / (4.0 * shape)))

    violations = []
    for i in range(1, len(S.eps_list)):
        di = deltas(us[i])
        bound = 4.0 * c0 * shape + h_values[i] + fit_slack
        violations.append(int(np.count_nonzero(di > bound)))
    return EquiModulusReport(c0=c0, violations=violations, h_values=h_values,
                             h_capped=h_capped, pairs=int(np.count_nonzero(keep)))


# ---------------------------------------------------------------------------
# Gradient convergence in measure away from the jump
# ---------------------------------------------------------------------------


@dataclass
class GradientMeasureReport:
    measures: list              # |E^rho| for consecutive pairs
    region_measure: float
    undecided: bool

    @property
    def non_increasing(self) -> bool:
        return all(self.measures[i + 1] <= self.measures[i] + 1e-14
                   for i in range(len(self.measures) - 1))


def gradient_convergence_in_measure(S: SweepResult, sigma: float,
                                    rho: float) -> GradientMeasureReport:
    """Measure of {|Dw_i - Dw_j| >= rho} on {|w_last - a| >= 2*sigma}.

    sigma must exceed every width in the sweep (the region must be away from
    all mollification ramps); an empty region yields UNDECIDED.
    """
    if sigma <= max(S.eps_list):
        raise InvalidParameterError(
            f"sigma = {sigma} must exceed the largest width {max(S.eps_list)}")
    P = S.params
    D = S.solutions[0].domain
    w_last = S.solutions[-1]
    region = np.zeros((D.n_steps + 1,) + D.shape, dtype=bool)
    for m in range(D.n_steps + 1):
        vals = w_last.values[m]
        with np.errstate(invalid="ignore"):
            region[m] = D.in_closure & (np.abs(vals - P.a) >= 2.0 * sigma)
    cell = D.h ** D.n * D.dt
    region_measure = float(np.count_nonzero(region)) * cell
    if region_measure == 0.0:
        return GradientMeasureReport([], 0.0, True)

    grads = []
    for s in S.solutions:
        g = np.empty((D.n_steps + 1, D.n) + D.shape)
        for m in range(D.n_steps + 1):
            g[m] = _slice_gradient(D, s.values[m])
        grads.append(g)
    measures = []
    for i in range(len(S.solutions) - 1):
        diff = grads[i] - grads[i + 1]
        norm = np.sqrt(np.sum(diff * diff, axis=1))
        count = int(np.count_nonzero(region & (norm >= rho)))
        measures.append(count * cell)
    return GradientMeasureReport(measures, region_measure, False)


# ---------------------------------------------------------------------------
# Near-jump gradient energy
# ---------------------------------------------------------------------------


def near_jump_energy(w: GridFunction, P: ModelParams, sigma: float, phi) -> float:
    """Space-time quadrature of |Dw|^p phi^p over {|w - a| <= 2*sigma}.

    phi must be compactly supported inside the open space-time cylinder.
    """
    D = w.domain
    _check_spacetime_support(D, phi)
    total = 0.0
    coords = D.node_coords
    for m in range(D.n_steps + 1):
        slab = w.values[m]
        gr = _slice_gradient(D, slab)
        gnorm = np.sqrt(np.sum(np.stack([gr[ax] for ax in range(D.n)], axis=-1) ** 2,
                               axis=-1))
        with np.errstate(invalid="ignore"):
            mask = D.in_closure & (np.abs(slab - P.a) <= 2.0 * sigma)
        phiv = phi.value(coords, D.times[m])
        total += float(np.nansum(np.where(mask, gnorm ** P.p * phiv ** P.p, 0.0)))
    return total * D.h ** D.n * D.dt


@dataclass
class EnergyScan:
    sigmas: list
    energies: list
    slope: float
    r_squared: float


def near_jump_energy_scan(w: GridFunction, P: ModelParams, sigma_list, phi) -> EnergyScan:
    """Least-squares log-log fit of the energy against sigma."""
    sigmas = sorted(float(s) for s in sigma_list)
    energies = [near_jump_energy(w, P, s, phi) for s in sigmas]
    pos = [(s, e) for s, e in zip(sigmas, energies) if e > 0.0]
    if len(pos) < 2:
        return EnergyScan(sigmas, energies, math.nan, math.nan)
    xs = np.log([s for s, _ in pos])
    ys = np.log([e for _, e in pos])
    slope, intercept = np.polyfit(xs, ys, 1)
    fitted = slope * xs + intercept
    ss_res = float(np.sum((ys - fitted) ** 2))
    ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return EnergyScan(sigmas, energies, float(slope), r2)


def _check_spacetime_support(D: GridDomain, phi) -> None:
    coords = D.node_coords
    probes = []
    if D.lateral.any():
        probes.append(float(np.max(np.abs(phi.value(coords[D.lateral], D.T / 2.0)))))
    probes.append(float(np.max(np.abs(phi.value(coords[D.in_closure], 0.0)))))
    probes.append(float(np.max(np.abs(phi.value(coords[D.in_closure], D.T)))))
    if max(probes) > 1e-10:
        raise SupportError("phi is not compactly supported in the open cylinder")


# ---------------------------------------------------------------------------
# Limit passage
# ---------------------------------------------------------------------------


@dataclass
class LimitPassageTerms:
    flux_away: float
    parabolic: float
    flux_near: float            # the near-jump pairing T_sigma
    boundary: float

    @property
    def total(self) -> float:
        return self.flux_away + self.parabolic + self.flux_near + self.boundary


def limit_passage_terms(w: GridFunction, P: ModelParams, sigma: float, varphi,
                        window, K) -> LimitPassageTerms:
    """The four terms of the weak formulation split at the sigma-neighborhood.

    The flux pairing is split by |w - a| <= sigma at the time-midpoint values;
    the parabolic and boundary terms match the quadrature of weak_residual
    exactly, so the four terms sum to the weak-form defect.
    """
    D = w.domain
    beta, H = P.beta, P.heaviside
    field = P.flux_field
    t1, t2 = window
    if not (0.0 < t1 < t2 <= D.T):
        raise InvalidParameterError(f"window {window} not inside (0, T]")
    m1, m2 = D.time_level_of(t1), D.time_level_of(t2)
    center, radius = K
    kmask = D.ball_mask(center, radius) & D.in_closure
    coords = D.node_coords
    pts = coords[kmask]
    hn = D.h ** D.n

    def v_of(m):
        slab = w.values[m][kmask]
        return slab + H(slab)

    boundary = float(np.sum(v_of(m2) * varphi.value(pts, D.times[m2])) -
                     np.sum(v_of(m1) * varphi.value(pts, D.times[m1]))) * hn
    parabolic = 0.0
    flux_near = 0.0
    flux_away = 0.0
    for m in range(m1, m2):
        ta, tb = D.times[m], D.times[m + 1]
        tm = 0.5 * (ta + tb)
        v_mid = 0.5 * (v_of(m) + v_of(m + 1))
        dphi = varphi.value(pts, tb) - varphi.value(pts, ta)
        parabolic -= float(np.sum(v_mid * dphi)) * hn
        w_mid_full = 0.5 * (w.values[m] + w.values[m + 1])
        grad = _slice_gradient(D, w_mid_full)
        gsel = np.stack([grad[ax][kmask] for ax in range(D.n)], axis=-1)
        A = transformed_flux_nodal(field, beta, pts, tm, w_mid_full[kmask], gsel)
        pair = np.sum(A * varphi.grad(pts, tm), axis=-1) * hn * D.dt
        near = np.abs(w_mid_full[kmask] - P.a) <= sigma
        flux_near += float(np.sum(pair[near]))
        flux_away += float(np.sum(pair[~near]))
    return LimitPassageTerms(flux_away=flux_away, parabolic=parabolic,
                             flux_near=flux_near, boundary=boundary)


@dataclass
class NearFluxScan:
    sigmas: list
    sizes: list
    slope: float
    shape_constant: float       # c fitted at the largest sigma for c*sigma^(1/p')
    shape_holds: bool


def near_flux_scan(w: GridFunction, P: ModelParams, sigma_list, varphi,
                   window, K) -> NearFluxScan:
    """|T_sigma| over a sigma ladder, with the sigma^(1/p') envelope check."""
    sigmas = sorted(float(s) for s in sigma_list)
    sizes = [abs(limit_passage_terms(w, P, s, varphi, window, K).flux_near)
             for s in sigmas]
    pos = [(s, v) for s, v in zip(sigmas, sizes) if v > 0.0]
    slope = math.nan
    if len(pos) >= 2:
        xs = np.log([s for s, _ in pos])
        ys = np.log([v for _, v in pos])
        slope = float(np.polyfit(xs, ys, 1)[0])
    inv_pp = 1.0 / P.p_prime
    c = sizes[-1] / sigmas[-1] ** inv_pp if sigmas else math.nan
    holds = all(v <= c * s ** inv_pp * (1.0 + 1e-9) for s, v in zip(sigmas, sizes))
    return NearFluxScan(sigmas, sizes, slope, c, holds)
