"""Gaussian cap probabilities.

For a unit vector ``u`` and ``z ~ N(0, I_d)``, ``<z, u>`` is a standard normal,
so the single-cap probability is the 1-d upper tail. For two unit vectors with
inner product ``alpha`` the pair ``(<z, p>, <z, q>)`` is a standard bivariate
normal with correlation ``alpha``; the joint cap probability is its upper
orthant. Both are evaluated in log-space so that thresholds far in the tail
(probabilities down to ~1e-300 and below) stay representable.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Half-width (in standard deviations) of the window integrated around the
# mode of the log-concave joint-cap integrand. Beyond 40 the integrand is
# below exp(-800) of its peak.
_WINDOW = 40.0


class NoSolution(ValueError):
    """A cap-probability inversion has no solution for the requested target."""


@dataclass(frozen=True)
class CapQuery:
    eta: float
    eta_prime: float
    alpha: float

    def __post_init__(self):
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [-1, 1], got {self.alpha}")

    @property
    def beta(self) -> float:
        return beta(self.alpha)

    @classmethod
    def for_approximation(cls, c: float, eta: float, eta_prime: float) -> "CapQuery":
        """Cap query for a planted pair at distance sqrt(2)/c on the unit sphere."""
        return cls(eta, eta_prime, planted_alpha(c))


@dataclass(frozen=True)
class CapProb:
    value: float
    log_value: float
    method: str  # exact-1d | bivariate-integral | monte-carlo | asymptotic


def planted_alpha(c: float) -> float:
    """Inner product of unit vectors at distance sqrt(2)/c: 1 - 1/c^2."""
    return 1.0 - 1.0 / (c * c)


def beta(alpha: float) -> float:
    return math.sqrt(max(0.0, 1.0 - alpha * alpha))


def _prob(log_value: float, method: str) -> CapProb:
    value = math.exp(log_value) if log_value > -745.0 else 0.0
    return CapProb(min(1.0, value), min(0.0, log_value), method)


def log_tail(eta: float) -> float:
    """log Q(eta), where Q is the standard normal upper tail."""
    return float(special.log_ndtr(-eta))


def tail(eta: float) -> CapProb:
    """Pr[<z, u> >= eta] for unit u, i.e. Q(eta) = erfc(eta / sqrt 2) / 2."""
    if eta == math.inf:
        return CapProb(0.0, -math.inf, "exact-1d")
    if eta == -math.inf:
        return CapProb(1.0, 0.0, "exact-1d")
    return _prob(log_tail(eta), "exact-1d")


def inv_tail(p: float) -> float:
    """Threshold eta with Q(eta) = p."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    eta = float(-special.ndtri(p))
    # one Newton step in log-space removes the last ulps of ndtri error
    log_p = math.log(p)
    for _ in range(2):
        lq = log_tail(eta)
        log_phi = -0.5 * eta * eta - LOG_SQRT_2PI
        # d/d eta log Q(eta) = -phi/Q
        slope = -math.exp(log_phi - lq)
        if slope == 0.0:
            break
        eta -= (lq - log_p) / slope
    return eta


def _log_phi(t):
    return -0.5 * t * t - LOG_SQRT_2PI


def _log_joint_integral(eta: float, eta_prime: float, alpha: float) -> float:
    """log of integral_{t >= eta'} phi(t) Q((eta - alpha t) / beta) dt, 0 < |alpha| < 1 or alpha = 0."""
    b = beta(alpha)
    ratio = alpha / b

    def g(t):
        return _log_phi(t) + special.log_ndtr(-(eta - alpha * t) / b)

    def dg(t):
        u = (eta - alpha * t) / b
        # derivative of log Q(u) is -phi(u)/Q(u); du/dt = -alpha/beta
        mills = math.exp(_log_phi(u) - special.log_ndtr(-u))
        return -t + ratio * mills

    # g is concave (sum of concave terms), so its maximiser on [eta', inf)
    # is either eta' or the unique root of g'.
    edge_slope = dg(eta_prime)
    if edge_slope <= 0.0:
        mode = eta_prime
    else:
        hi = max(eta_prime, 0.0) + 1.0
        while dg(hi) > 0.0:
            hi = hi * 2.0 + 1.0
        mode = optimize.brentq(dg, eta_prime, hi, xtol=1e-14, rtol=1e-15)
    peak = g(mode)
    lo = max(eta_prime, mode - _WINDOW)
    hi = mode + _WINDOW

    def f(t):
        return math.exp(g(t) - peak)

    # The Q factor changes over a t-scale of beta/|alpha|, which is tiny near
    # |alpha| = 1; breakpoints at geometric offsets from the mode resolve it.
    scale = 1.0 if alpha == 0.0 else min(1.0, b / abs(alpha))
    if mode == eta_prime and edge_slope < 0.0:
        scale = min(scale, -1.0 / edge_slope)
    offsets = [0.0]
    step = scale
    while step < _WINDOW:
        offsets.append(step)
        step *= 4.0
    offsets.append(_WINDOW)
    knots = sorted({min(hi, max(lo, mode + s * o)) for o in offsets for s in (-1.0, 1.0)})
    total = 0.0
    with warnings.catch_warnings():
        # near-degenerate pieces trip quad's heuristics; the knot split keeps each piece smooth
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for a, b_ in zip(knots, knots[1:]):
            part, _ = integrate.quad(f, a, b_, epsabs=0.0, epsrel=1e-13, limit=200)
            total += part
    if total <= 0.0:
        # decay width below the float spacing of t: boundary Laplace term
        return peak - math.log(-edge_slope)
    return peak + math.log(total)


def log_joint_cap(eta: float, eta_prime: float, alpha: float) -> float:
    """log Pr[X >= eta, Y >= eta'] for a standard bivariate normal with correlation alpha."""
    if not -1.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [-1, 1], got {alpha}")
    if eta_prime == -math.inf:
        return tail(eta).log_value
    if eta == -math.inf:
        return tail(eta_prime).log_value
    if eta == math.inf or eta_prime == math.inf:
        return -math.inf
    if alpha == 1.0:
        return log_tail(max(eta, eta_prime))
    if alpha == -1.0:
        # X >= eta and -X >= eta'  <=>  eta <= X <= -eta'
        if eta >= -eta_prime:
            return -math.inf
        return log_tail(eta) + math.log1p(-math.exp(log_tail(-eta_prime) - log_tail(eta)))
    return _log_joint_integral(eta, eta_prime, alpha)


def joint_cap(eta: float, eta_prime: float, alpha: float) -> CapProb:
    """Pr[<z, p> >= eta and <z, q> >= eta'] for unit p, q with <p, q> = alpha.

    Rotational invariance reduces this to the bivariate normal orthant, which
    is evaluated as the 1-d integral of phi(t) Q((eta - alpha t)/beta) over
    t >= eta'.
    """
    lv = log_joint_cap(eta, eta_prime, alpha)
    method = "exact-1d" if abs(alpha) == 1.0 or math.isinf(eta) or math.isinf(eta_prime) \
        else "bivariate-integral"
    if lv == -math.inf:
        return CapProb(0.0, -math.inf, method)
    return _prob(lv, method)


def joint_cap_asymptotic_exponent(eta: float, eta_prime: float, alpha: float) -> float:
    """(eta^2 + eta'^2 - 2 alpha eta eta') / (2 beta^2): the leading decay rate of joint_cap."""
    b2 = 1.0 - alpha * alpha
    if b2 <= 0.0:
        raise ValueError("asymptotic exponent undefined for |alpha| = 1 (beta = 0)")
    return (eta * eta + eta_prime * eta_prime - 2.0 * alpha * eta * eta_prime) / (2.0 * b2)


def joint_cap_mc(eta: float, eta_prime: float, alpha: float, samples: int, seed: int = 0,
                 chunk: int = 2_000_000) -> tuple[float, float]:
    """Monte Carlo estimate of joint_cap and its standard error."""
    rng = np.random.default_rng(seed)
    b = beta(alpha)
    hits = 0
    left = samples
    while left > 0:
        m = min(chunk, left)
        x = rng.standard_normal(m)
        y = alpha * x + b * rng.standard_normal(m)
        hits += int(np.count_nonzero((x >= eta_prime) & (y >= eta)))
        left -= m
    p = hits / samples
    return p, math.sqrt(max(p * (1.0 - p), 1e-300) / samples)


def inv_joint_cap_eta_prime(eta: float, alpha: float, target_p: float) -> float:
    """Largest eta' with joint_cap(eta, eta', alpha) >= target_p (equality at the root).

    joint_cap is continuous and strictly decreasing in eta' wherever it is
    positive, so the root is found by bracketing (geometric expansion) and
    Brent's method on the log-probability.
    """
    if not 0.0 < target_p < 1.0:
        raise ValueError(f"target_p must lie in (0, 1), got {target_p}")
    log_target = math.log(target_p)
    limit = tail(eta).log_value
    if log_target > limit:
        raise NoSolution(
            f"target {target_p:.6g} exceeds the eta'->-inf limit tail(eta)={math.exp(limit):.6g}")
    if log_target == limit:
        return -math.inf
    if alpha == 1.0:
        # Q(max(eta, eta')) = target and target < Q(eta)  =>  eta' > eta
        return inv_tail(target_p)

    def h(x):
        return log_joint_cap(eta, x, alpha) - log_target

    lo, hi = -1.0, 1.0
    while h(lo) < 0.0:
        lo = lo * 2.0 - 1.0
        if lo < -1e3:
            raise NoSolution("no bracket found below")
    while h(hi) > 0.0:
        hi = hi * 2.0 + 1.0
        if hi > 1e3:
            raise NoSolution("no bracket found above")
    return float(optimize.brentq(h, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500))
