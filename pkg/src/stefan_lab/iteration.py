"""Exact-arithmetic constants engine: exponents, the log-log modulus, and the
oscillation-reduction sequences.

Everything here runs in extended precision (mpmath, 120+ bits): the radii
R_j collapse doubly exponentially and the anchored constant
lambda0 = exp(exp(theta^(-1/alpha))) typically exceeds double range, while
the recursion and doubling inequalities must be checked as exact
comparisons, not within a sloppy tolerance.

The extended-real kappa is a tagged value (None means +infinity); no formula
ever consumes a float infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from mpmath import mp, mpf

from .model import InvalidParameterError, bar_q

DOUBLE_TINY = float(np.finfo(np.float64).tiny)

_PREC = 120


class ModulusDomainError(ValueError):
    """The double logarithm in the modulus is not positive at this radius."""


class IterationInvariantError(ValueError):
    """A sequence invariant failed; carries the first failing index."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class RootBracketError(ValueError):
    """No root in the admissible bracket; carries the bracket maximum value."""

    def __init__(self, message: str, bracket_max: float):
        super().__init__(message)
        self.bracket_max = bracket_max


# ---------------------------------------------------------------------------
# Exponent algebra
# ---------------------------------------------------------------------------


def kappa_of(n: int, p: float, q: float):
    """Sobolev conjugate factor: n/(n-p) below n, q/(q-2) at n, None (= +inf) above."""
    if p < 2:
        raise InvalidParameterError(f"p must be >= 2, got {p}")
    if q <= bar_q(n, p):
        raise InvalidParameterError(f"q must exceed bar_q = {bar_q(n, p)}, got {q}")
    if p < n:
        return n / (n - p)
    if p == n:
        return q / (q - 2.0)
    return None


@dataclass
class ExponentPack:
    """Derived exponents for a given (n, p, q) and datum exponent gamma."""

    p: float
    n: int
    q: float
    gamma: float = 0.5
    p_prime: float = field(init=False)
    q_bar: float = field(init=False)
    alpha: float = field(init=False)
    kappa: object = field(init=False)
    zeta: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        self.p_prime = self.p / (self.p - 1.0)
        self.q_bar = bar_q(self.n, self.p)
        if self.q <= self.q_bar:
            raise InvalidParameterError(
                f"q must exceed bar_q(n={self.n}, p={self.p}) = {self.q_bar}, got {self.q}")
        self.alpha = 1.0 / (self.p_prime * self.q)
        self.kappa = kappa_of(self.n, self.p, self.q)
        self.zeta = (1.0 - 1.0 / self.q) * (2.0 - self.inv_kappa) - 1.0
        if self.zeta <= 0.0:
            raise IterationInvariantError(
                f"absorption exponent must be positive, got zeta = {self.zeta}", 0)
        if not 0.0 < self.alpha < 1.0 / (self.p_prime * self.q_bar):
            raise InvalidParameterError(f"alpha = {self.alpha} outside (0, 1/(p' bar_q))")

    @property
    def inv_kappa(self) -> float:
        """1/kappa with the tagged-infinity convention 1/inf = 0."""
        return 0.0 if self.kappa is None else 1.0 / self.kappa


# ---------------------------------------------------------------------------
# The log-log modulus
# ---------------------------------------------------------------------------


def anchor_log_lambda0(theta: float, alpha: float) -> mpf:
    """log of the anchored constant: exp(theta^(-1/alpha)).

    The anchor itself, exp(exp(theta^(-1/alpha))), is far beyond double range
    for small theta and is never materialized; all modulus arithmetic runs on
    its logarithm, whose binary exponent stays a small integer.
    """
    with mp.workprec(_PREC):
        return mp.exp(mpf(theta) ** (-1.0 / mpf(alpha)))


def default_lambda0(theta: float, alpha: float) -> mpf:
    """Materialized anchor exp(exp(theta^(-1/alpha))), when representable cheaply."""
    with mp.workprec(_PREC):
        e = mpf(theta) ** (-1.0 / mpf(alpha))
        if e > 500:
            raise InvalidParameterError(
                "anchored lambda0 is too large to materialize; "
                "work with anchor_log_lambda0 instead")
        return mp.exp(mp.exp(e))


def _resolve_log_lambda0(lambda0, theta: float, alpha: float) -> mpf:
    if lambda0 is None or (isinstance(lambda0, str) and lambda0 == "auto"):
        return anchor_log_lambda0(theta, alpha)
    val = mpf(lambda0)
    if val < mp.e:
        raise InvalidParameterError(f"lambda0 must be >= e, got {float(val)}")
    return mp.log(val)


def _modulus_mp(r, R0, theta, alpha, log_lambda0) -> mpf:
    inner = mpf(log_lambda0) + mp.log(mpf(R0) / mpf(r))
    if inner <= 1:
        raise ModulusDomainError(
            f"log(lambda0*R0/r) = {mp.nstr(inner, 8)} <= 1 at r = {float(r)}; "
            "r too large for this lambda0")
    return (1 / mpf(theta)) * mp.log(inner) ** (-mpf(alpha))


def modulus(r: float, R0: float, theta: float, alpha: float, lambda0=None,
            log_lambda0=None) -> float:
    """Iterated-logarithm modulus (1/theta) [log log(lambda0 R0 / r)]^(-alpha).

    Strictly increasing in r on (0, R0]; raises when the double logarithm is
    not positive.  lambda0 = None uses the anchored constant, for which the
    value at r = R0 is exactly 1; huge anchors may be passed via log_lambda0.
    """
    if not 0.0 < r <= R0:
        raise InvalidParameterError(f"radius must lie in (0, R0], got {r}")
    with mp.workprec(_PREC):
        if log_lambda0 is None:
            log_lambda0 = _resolve_log_lambda0(lambda0, theta, alpha)
        return float(_modulus_mp(r, R0, theta, alpha, log_lambda0))


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class IterationState:
    """Oscillation/radius/time sequences and the modulus closure.

    All sequence entries are mpf; T_j carries a float log companion because
    tilde_omega_j^(1-p) R_j^p routinely leaves double range.  delta_tilde is
    the boundary-layer constant with delta_tilde^(2-p) = tilde_omega_0^(1-p);
    at p = 2 the defining exponent vanishes and the value is arbitrary, so it
    is None with a flag.
    """

    theta: float
    tau: float
    alpha: float
    p: float
    R0: float
    log_lambda0: object
    omega: list
    tilde_omega: list
    R: list
    T: list
    log_T: list
    truncated: bool
    delta_tilde: object
    delta_tilde_arbitrary: bool

    def omega_of(self, r: float) -> float:
        return modulus(r, self.R0, self.theta, self.alpha,
                       log_lambda0=self.log_lambda0)

    def __len__(self) -> int:
        return len(self.R)

    def rows(self):
        """CSV-ready rows: j, omega, tilde_omega, R, T, recursion lhs/rhs, pass."""
        reports = verify_claim42(self)
        out = []
        for j in range(len(self.R)):
            rec = reports[j] if j < len(reports) else None
            out.append({
                "j": j,
                "omega_j": mp.nstr(self.omega[j], 17),
                "tilde_omega_j": mp.nstr(self.tilde_omega[j], 17),
                "R_j": mp.nstr(self.R[j], 17),
                "T_j": mp.nstr(self.T[j], 17),
                "recursion_lhs": mp.nstr(rec.lhs, 17) if rec else "",
                "recursion_rhs": mp.nstr(rec.rhs, 17) if rec else "",
                "pass": str(bool(rec.recursion_ok and rec.doubling_ok)) if rec else "",
            })
        return out


def build_sequences(P, E: ExponentPack, J: int) -> IterationState:
    """Radii, oscillations, auxiliary scales and time lengths for J indices.

    omega_j := omega(R_j) with the anchored lambda0 (so omega_0 = 1);
    tilde_j := tau*omega_j*exp(-(tau*omega_j)^(-1/alpha));
    R_{j+1} := exp(-(theta/alpha)(theta*omega_j)^(-1/alpha)) R_j;
    T_j := tilde_j^(1-p) R_j^p.  The sequence is truncated with a flag when
    R_j falls below the double-precision tiny; every invariant (monotonicity,
    recursion, doubling) is verified before returning.
    """
    if J < 1:
        raise InvalidParameterError(f"need J >= 1 indices, got {J}")
    theta, tau, alpha, p = P.theta, P.tau, E.alpha, P.p
    with mp.workprec(_PREC):
        log_lam0 = _resolve_log_lambda0(P.lambda0, theta, alpha)
        R = [mpf(P.R0)]
        omega = [_modulus_mp(R[0], P.R0, theta, alpha, log_lam0)]
        if abs(omega[0] - 1) > mpf("1e-10"):
            raise InvalidParameterError(
                "omega(R0) must equal 1: lambda0 must be the anchored value "
                "exp(exp(theta^(-1/alpha)))")
        tilde, T, log_T = [], [], []
        truncated = False
        for j in range(J + 1):
            to = mpf(tau) * omega[j] * mp.exp(-((mpf(tau) * omega[j]) ** (-1 / mpf(alpha))))
            tilde.append(to)
            Tj = to ** (1 - mpf(p)) * R[j] ** mpf(p)
            T.append(Tj)
            lt = mp.log(Tj)
            log_T.append(float(lt) if abs(lt) < mpf("1e308") else
                         math.copysign(math.inf, float(mp.sign(lt))))
            if j == J:
                break
            ratio = mp.exp(-(mpf(theta) / mpf(alpha))
                           * (mpf(theta) * omega[j]) ** (-1 / mpf(alpha)))
            R_next = ratio * R[j]
            # extended-precision underflow guard: exponents stay small integers,
            # so this fires only for pathological configurations
            if mp.log(R_next) < mpf("-1e300"):
                truncated = True
                break
            R.append(R_next)
            omega.append(_modulus_mp(R_next, P.R0, theta, alpha, log_lam0))

        if p == 2.0:
            delta_tilde, arbitrary = None, True
        else:
            delta_tilde = tilde[0] ** ((1 - mpf(p)) / (2 - mpf(p)))
            arbitrary = False

        state = IterationState(
            theta=theta, tau=tau, alpha=alpha, p=p, R0=P.R0, log_lambda0=log_lam0,
            omega=omega, tilde_omega=tilde, R=R, T=T, log_T=log_T,
            truncated=truncated, delta_tilde=delta_tilde,
            delta_tilde_arbitrary=arbitrary,
        )
        _verify_state_invariants(state)
        return state


def _verify_state_invariants(S: IterationState) -> None:
    for j in range(len(S.R) - 1):
        if not S.omega[j + 1] <= S.omega[j]:
            raise IterationInvariantError(f"omega not decreasing at j = {j}", j)
        if not S.R[j + 1] < S.R[j]:
            raise IterationInvariantError(f"R not strictly decreasing at j = {j}", j)
    for rep in verify_claim42(S):
        if not rep.recursion_ok:
            raise IterationInvariantError(f"recursion fails at j = {rep.j}", rep.j)
        if not rep.doubling_ok:
            raise IterationInvariantError(f"doubling fails at j = {rep.j}", rep.j)


@dataclass
class ClaimIndexReport:
    j: int
    lhs: object
    rhs: object
    recursion_ok: bool
    doubling_ok: bool


def verify_claim42(S: IterationState) -> list:
    """Exact recursion and doubling comparison at every transition index.

    Checks omega(R_{j+1}) >= omega(R_j)(1 - theta exp(-(theta omega(R_j))^(-1/alpha)))
    and omega(R_j) <= 2 omega(R_{j+1}) with exact extended-precision
    comparisons; failures are reported, not raised.
    """
    out = []
    with mp.workprec(_PREC):
        for j in range(len(S.R) - 1):
            wj, wj1 = S.omega[j], S.omega[j + 1]
            rhs = wj * (1 - mpf(S.theta)
                        * mp.exp(-((mpf(S.theta) * wj) ** (-1 / mpf(S.alpha)))))
            out.append(ClaimIndexReport(
                j=j, lhs=wj1, rhs=rhs,
                recursion_ok=bool(wj1 >= rhs),
                doubling_ok=bool(wj <= 2 * wj1),
            ))
    return out


# ---------------------------------------------------------------------------
# The error map h(eps) and the hyper-geometric lemma
# ---------------------------------------------------------------------------


def h_of_eps(eps, tau: float, alpha: float) -> mpf:
    """Unique h in (0, 1/tau] with tau*h*exp(-(tau*h)^(-1/alpha)) = 2*eps.

    The left side is strictly increasing, so bisection applies; the returned
    root satisfies the defining equation to <= 1e-14 relative.  eps may be an
    mpf far below double range.
    """
    with mp.workprec(200):
        target = 2 * mpf(eps)
        if target <= 0:
            raise InvalidParameterError("eps must be > 0")

        def g(s):
            return s * mp.exp(-(s ** (-1 / mpf(alpha))))

        s_hi = mpf(1)
        g_hi = g(s_hi)
        if target > g_hi:
            raise RootBracketError(
                f"2*eps = {mp.nstr(target, 8)} exceeds the bracket maximum "
                f"{mp.nstr(g_hi, 8)}; eps too large", float(g_hi) / 2.0)
        # g vanishes faster than any power as s -> 0+, so the bracket is safe
        s_lo = mpf("1e-30")
        while g(s_lo) > target:
            s_lo = s_lo / 2
        for _ in range(400):
            mid = (s_lo + s_hi) / 2
            if g(mid) < target:
                s_lo = mid
            else:
                s_hi = mid
            if (s_hi - s_lo) / s_hi < mpf("1e-40"):
                break
        s = (s_lo + s_hi) / 2
        return s / mpf(tau)


@dataclass
class HyperGeomResult:
    sequence: list
    converged: bool
    threshold: float
    diverged: bool


def hypergeometric_iteration(C: float, b: float, zeta: float, A0, J: int) -> HyperGeomResult:
    """Iterate A_{j+1} = C * b^j * A_j^(1+zeta) for J steps.

    threshold = C^(-1/zeta) * b^(-1/zeta^2): starting at or below it the
    sequence decays (geometrically at worst).  The practical convergence flag
    is the decay test A_J <= A_0 * 2^-J; 'diverged' reports growth past 1e100.
    """
    if zeta <= 0.0:
        raise InvalidParameterError("no absorption exponent: zeta must be > 0")
    if C < 1.0 or b < 1.0 or A0 < 0.0:
        raise InvalidParameterError("need C >= 1, b >= 1, A0 >= 0")
    with mp.workprec(_PREC):
        threshold = float(mpf(C) ** (-1 / mpf(zeta)) * mpf(b) ** (-1 / mpf(zeta) ** 2))
        seq = [mpf(A0)]
        for j in range(J):
            seq.append(mpf(C) * mpf(b) ** j * seq[-1] ** (1 + mpf(zeta)))
        AJ = seq[-1]
        converged = bool(AJ <= mpf(A0) * mpf(2) ** (-J)) if A0 > 0 else True
        diverged = bool(AJ > mpf("1e100"))
    return HyperGeomResult(sequence=seq, converged=converged,
                           threshold=threshold, diverged=diverged)


# ---------------------------------------------------------------------------
# The alternative constants
# ---------------------------------------------------------------------------


@dataclass
class EpsConstants:
    eps1: object        # mpf; astronomically small for honest structural constants
    eps2: float
    eps3: float
    note: str


def eps_constants(E: ExponentPack, c_ell: float = 1.0, bar_c: float = 1.0,
                  tilde_c: float = 1.0, eps2: float = 2.0 ** -10) -> EpsConstants:
    """Evaluate the closed-form alternative constants.

    eps3 = 1/(2^(3p) c_ell bar_c).  eps1 is the minimum of
    exp[-(c_ell tilde_c^(1/zeta) 2^(4p/zeta^2) eps3^(-(1/p+(2-1/kappa)/(zeta q))))^(p')],
    eps2^(p-2), eps2 and 2^-10; the first entry usually underflows doubles, so
    it is returned as an mpf.  eps2 has no closed form (it is fixed by the
    away-from-jump iteration, depending only on the data) and is passed
    through from configuration.
    """
    if min(c_ell, bar_c, tilde_c) < 1.0:
        raise InvalidParameterError("structural constants c_ell, bar_c, tilde_c must be >= 1")
    if E.zeta <= 0.0:
        raise IterationInvariantError("zeta must be positive", 0)
    p, q, zeta = E.p, E.q, E.zeta
    eps3 = 1.0 / (2.0 ** (3.0 * p) * c_ell * bar_c)
    with mp.workprec(_PREC):
        expo = 1.0 / p + (2.0 - E.inv_kappa) / (zeta * q)
        inner = (mpf(c_ell) * mpf(tilde_c) ** (1 / mpf(zeta))
                 * mpf(2) ** (4 * p / mpf(zeta) ** 2) * mpf(eps3) ** (-mpf(expo)))
        formula = mp.exp(-(inner ** mpf(E.p_prime)))
        eps1 = min(formula, mpf(eps2) ** (p - 2.0), mpf(eps2), mpf(2) ** -10)
    note = ("eps2 is a configuration input: the away-from-jump case fixes it as a "
            "function of the data only, without a closed form")
    return EpsConstants(eps1=eps1, eps2=eps2, eps3=eps3, note=note)


# ---------------------------------------------------------------------------
# Sufficient smallness predicates for theta (reported, never asserted)
# ---------------------------------------------------------------------------


def theta_predicates(theta: float, tau: float, E: ExponentPack,
                     M_tilde: float = 1.0, alpha_tilde: float = 0.25,
                     eps4: float = 0.1) -> dict:
    """Sufficient conditions on theta collected from the iteration argument.

    Unknown structural factors are taken as 1, so these are stand-in
    predicates: the engine reports them and picks default thetas from them,
    but no estimate asserts them as exact.
    """
    p, alpha = E.p, E.alpha
    out = {}
    out["shrink_ratio"] = math.exp(-(1.0 / theta) / (3.0 * alpha)) <= 1.0 / 32.0
    out["theta_vs_tau"] = theta <= tau ** (1.0 / (1.0 - alpha))
    out["theta_le_eps4"] = theta <= eps4
    sigma_grid = np.linspace(1e-4, 1.0 - 1e-4, 4000)
    supS = float(np.max(sigma_grid ** (1.0 - (p - 2.0) / alpha_tilde)
                        * np.exp(-(p - 1.0) * sigma_grid ** (-1.0 / alpha))))
    out["tau_interior"] = M_tilde * supS * tau ** ((p - 2.0) * (1.0 + 1.0 / alpha_tilde)) <= 1.0
    lhs = (2.0 / tau) ** (1.0 / alpha) - (2.0 / (3.0 * alpha)) * theta ** (-(1.0 - alpha) / alpha)
    out["lateral_window"] = lhs <= -(p + 3.0) * math.log(2.0) / p
    K = p * theta ** (1.0 - 1.0 / alpha) / (6.0 * alpha)
    out["interior_inclusion"] = (K >= alpha) and ((p - 1.0) * math.log(1.0 / theta) <= K)
    return out


def largest_admissible_theta(tau: float, E: ExponentPack, M_tilde: float = 1.0,
                             alpha_tilde: float = 0.25, eps4: float = 0.1,
                             grid=None):
    """Largest theta on a coarse descending grid passing every predicate."""
    if grid is None:
        grid = np.linspace(0.49, 0.005, 98)
    for theta in grid:
        preds = theta_predicates(float(theta), tau, E, M_tilde, alpha_tilde, eps4)
        if all(preds.values()):
            return float(theta)
    return None
