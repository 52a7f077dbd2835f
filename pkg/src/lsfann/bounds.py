"""Trade-off curves, lower-bound evaluators and exact Boolean-function tools.

Curves relate the query exponent rho_q (query time n^rho_q) to the space
exponent rho_u (space n^(1 + rho_u)); rho_s = 1 + rho_u.

* ``eq1``   Euclidean:  c^2 sqrt(rho_q) + (c^2 - 1) sqrt(rho_u) = sqrt(2c^2 - 1)
* ``eq2``   Hamming:    c sqrt(rho_q) + (c - 1) sqrt(rho_u) = sqrt(2c - 1)
* ``eq3``   list-of-points lower bound; its boundary coincides with ``eq2``
            and is evaluated here through the hypercontractive (p, q) route
* ``tree``  filter tree: 1 + a^2 rho_s - rho_q - 2a sqrt(rho_s - rho_q) = 0,
            a = 1 - 1/c^2

Boolean functions live on {-1, 1}^d with vertex index bit i set meaning
x_i = -1. Norms use the uniform probability measure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CURVES = ("eq1", "eq2", "eq3", "tree")
MAX_BOOLEAN_DIM = 24


class OutOfRange(ValueError):
    """A requested exponent lies outside a curve's admissible range."""


# --- trade-off curves -------------------------------------------------------

@dataclass(frozen=True)
class TradeoffPoint:
    c: float
    rho_q: float
    rho_u: float
    curve: str
    rho_s: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "rho_s", 1.0 + self.rho_u)

    @property
    def residual(self) -> float:
        return curve_residual(self.curve, self.c, self.rho_u, self.rho_q)


def _check_c(c: float):
    if not c > 1.0:
        raise ValueError(f"c must exceed 1, got {c}")


def _linear_coeffs(curve: str, c: float) -> tuple[float, float, float]:
    """(a, b, s) with a sqrt(rho_q) + b sqrt(rho_u) = s."""
    if curve == "eq1":
        return c * c, c * c - 1.0, math.sqrt(2.0 * c * c - 1.0)
    if curve in ("eq2", "eq3"):
        return c, c - 1.0, math.sqrt(2.0 * c - 1.0)
    raise ValueError(f"curve {curve!r} is not of the linear-in-square-roots form")


def max_rho_u(curve: str, c: float) -> float:
    """rho_u at which rho_q reaches 0."""
    _check_c(c)
    if curve == "tree":
        curve = "eq1"
    a, b, s = _linear_coeffs(curve, c)
    return (s / b) ** 2


def max_rho_q(curve: str, c: float) -> float:
    """rho_q at rho_u = 0."""
    _check_c(c)
    if curve == "tree":
        curve = "eq1"
    a, b, s = _linear_coeffs(curve, c)
    return (s / a) ** 2


def curve_residual(curve: str, c: float, rho_u: float, rho_q: float) -> float:
    if curve == "tree":
        alpha = 1.0 - 1.0 / (c * c)
        rho_s = 1.0 + rho_u
        return 1.0 + alpha * alpha * rho_s - rho_q - 2.0 * alpha * math.sqrt(max(0.0, rho_s - rho_q))
    a, b, s = _linear_coeffs(curve, c)
    return a * math.sqrt(rho_q) + b * math.sqrt(rho_u) - s


def list_of_points_rho_q(c: float, rho_u: float) -> float:
    """Lower-bound query exponent from the hypercontractive (p, q) choice.

    With sigma = 1 - 1/c and b = sqrt((1 - sigma^2)/rho_u), take
    q = 1 - sigma^2 + sigma b and p = b / (b - sigma), so that
    (p - 1)(q - 1) = sigma^2; the resulting bound is
    rho_q = (1 + rho_u)(1 - q) + q / p. At rho_u = 0 it is 1 - sigma^2.
    Only q enters the rearranged form; p is fixed by the constraint.
    """
    _check_c(c)
    sigma = 1.0 - 1.0 / c
    if rho_u < 0.0:
        raise OutOfRange("rho_u must be nonnegative")
    b = math.sqrt((1.0 - sigma * sigma) / rho_u) if rho_u > 0.0 else math.inf
    if math.isinf(b):
        return 1.0 - sigma * sigma
    if b <= sigma:
        raise OutOfRange(f"rho_u={rho_u} beyond the list-of-points range for c={c}")
    q = 1.0 - sigma * sigma + sigma * b
    # q / p = q (1 - sigma / b); expanding avoids cancelling two terms of size q
    return 1.0 + rho_u * (1.0 - q) - q * sigma / b


def tree_tradeoff_rho_q(c: float, rho_s: float, tol: float = 1e-15, *, rho_u: float | None = None) -> float:
    """Solve 1 + a^2 rho_s - rho_q - 2a sqrt(rho_s - rho_q) = 0 for rho_q by bisection.

    Substituting x = sqrt(rho_s - rho_q) gives (x - a)^2 = (1 - a^2)(rho_s - 1);
    the branch with x >= a is the one whose rho_q decreases as rho_s grows.
    The residual is increasing in x on [a, sqrt(rho_s)], i.e. decreasing in
    rho_q on [0, rho_s - a^2], which is where the bisection runs.
    Passing ``rho_u`` (= rho_s - 1) avoids losing it to rounding when it is tiny.
    """
    _check_c(c)
    alpha = 1.0 - 1.0 / (c * c)
    if rho_s < 1.0 - 1e-12:
        raise OutOfRange(f"rho_s must be >= 1, got {rho_s}")
    rho_s = max(rho_s, 1.0)
    excess = rho_s - 1.0 if rho_u is None else rho_u
    if rho_s > 1.0 / (alpha * alpha) * (1.0 + 1e-12):
        raise OutOfRange(f"rho_s={rho_s} beyond 1/a^2={1.0 / alpha**2} (rho_q would be negative)")

    def resid(x):
        return (x - alpha) ** 2 - (1.0 - alpha * alpha) * excess

    lo, hi = alpha, math.sqrt(rho_s)
    if resid(hi) < 0.0:  # rounding at the rho_q = 0 end
        return 0.0
    for _ in range(200):
        if hi - lo <= tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if resid(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    # rho_s - x^2 = (1 - a^2) + excess - (x^2 - a^2), kept in small terms
    return max(0.0, (1.0 - alpha * alpha) + excess - (x - alpha) * (x + alpha))


def solve_tradeoff(curve: str, c: float, rho_u: float) -> TradeoffPoint:
    """rho_q on ``curve`` for space exponent rho_u (nonnegative root)."""
    _check_c(c)
    if curve not in CURVES:
        raise ValueError(f"unknown curve {curve!r}; expected one of {CURVES}")
    if rho_u < 0.0:
        raise OutOfRange("rho_u must be nonnegative")
    top = max_rho_u(curve, c)
    if rho_u > top * (1.0 + 1e-12):
        raise OutOfRange(f"rho_u={rho_u} exceeds {top} on {curve} at c={c}")
    if curve == "tree":
        return TradeoffPoint(c, tree_tradeoff_rho_q(c, 1.0 + rho_u, rho_u=rho_u), rho_u, curve)
    if curve == "eq3":
        rho_u_eff = min(rho_u, top)
        if rho_u_eff >= top:
            return TradeoffPoint(c, 0.0, rho_u, curve)
        return TradeoffPoint(c, max(0.0, list_of_points_rho_q(c, rho_u_eff)), rho_u, curve)
    a, b, s = _linear_coeffs(curve, c)
    root = max(0.0, (s - b * math.sqrt(rho_u)) / a)
    return TradeoffPoint(c, root * root, rho_u, curve)


def solve_tradeoff_rho_u(curve: str, c: float, rho_q: float) -> TradeoffPoint:
    """Inverse direction: rho_u on ``curve`` for query exponent rho_q."""
    _check_c(c)
    if curve not in CURVES:
        raise ValueError(f"unknown curve {curve!r}; expected one of {CURVES}")
    top = max_rho_q(curve, c)
    if rho_q < 0.0 or rho_q > top * (1.0 + 1e-12):
        raise OutOfRange(f"rho_q={rho_q} outside [0, {top}] on {curve} at c={c}")
    if curve == "tree":
        # rho_q is decreasing in rho_s along the tree curve; bisect with the forward solver
        lo, hi = 1.0, 1.0 / (1.0 - 1.0 / (c * c)) ** 2
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if tree_tradeoff_rho_q(c, mid) > rho_q:
                lo = mid
            else:
                hi = mid
        return TradeoffPoint(c, rho_q, 0.5 * (lo + hi) - 1.0, curve)
    a, b, s = _linear_coeffs(curve, c)
    root = max(0.0, (s - a * math.sqrt(rho_q)) / b)
    return TradeoffPoint(c, rho_q, root * root, curve)


def balanced_rho(curve: str, c: float) -> float:
    """rho with rho_q = rho_u on a linear curve: s / (a + b), squared."""
    if curve == "tree":
        curve = "eq1"
    a, b, s = _linear_coeffs(curve, c)
    return (s / (a + b)) ** 2


def one_probe_space_exponent(c: float) -> float:
    """Space exponent (c/(c-1))^2 = 1/sigma^2 of the one-probe lower bound."""
    _check_c(c)
    return (c / (c - 1.0)) ** 2


# --- PTW-style inequality ----------------------------------------------------

def ptw_schedule(n: float, sigma: float) -> tuple[float, float]:
    """(p, q) = (1 + lnln n / ln n, 1 + sigma^2 ln n / lnln n); natural logs, n > e."""
    if not n > math.e:
        raise ValueError("ptw schedule needs n > e so that ln ln n > 0")
    ln = math.log(n)
    lln = math.log(ln)
    return 1.0 + lln / ln, 1.0 + sigma * sigma * ln / lln


def log_robust_expansion_bound(sigma: float, m: float, gamma: float, p: float, q: float) -> float:
    if abs((p - 1.0) * (q - 1.0) - sigma * sigma) > 1e-9 * max(1.0, sigma * sigma):
        raise ValueError(f"(p-1)(q-1)={(p - 1) * (q - 1)} differs from sigma^2={sigma * sigma}")
    if m < 1.0:
        raise ValueError("m must be >= 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    return q * math.log(gamma) + (1.0 + q / p - q) * math.log(m)


def robust_expansion_bound(sigma: float, m: float, gamma: float, p: float, q: float) -> float:
    """gamma^q m^(1 + q/p - q), the hypercontractive lower bound on robust expansion."""
    return math.exp(log_robust_expansion_bound(sigma, m, gamma, p, q))


def ptw_inequality_log(m: float, t: float, w: float, n: float, c: float, gamma: float) -> tuple[float, float]:
    """Natural logs of both sides of m^t w / n >= gamma_t^q (m^t)^(1 + q/p - q), gamma_t = gamma / t."""
    if m < 1 or n < 1 or t < 1:
        raise ValueError("need m, n, t >= 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    sigma = 1.0 - 1.0 / c
    p, q = ptw_schedule(n, sigma)
    log_cells = t * math.log(m)
    lhs = log_cells + math.log(w) - math.log(n)
    rhs = q * math.log(gamma / t) + (1.0 + q / p - q) * log_cells
    return lhs, rhs


def ptw_inequality_lhs_rhs(m: float, t: float, w: float, n: float, c: float, gamma: float) -> tuple[float, float]:
    """Both sides of the cell-probe inequality, evaluated with the ptw (p, q) schedule."""
    lhs, rhs = ptw_inequality_log(m, t, w, n, c, gamma)
    return math.exp(lhs), math.exp(rhs)


# --- Boolean functions --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BooleanFn:
    d: int
    table: np.ndarray

    def __post_init__(self):
        if self.d > MAX_BOOLEAN_DIM:
            raise ValueError(f"dimension {self.d} exceeds cap {MAX_BOOLEAN_DIM}")
        t = np.asarray(self.table, dtype=np.float64)
        if t.shape != (1 << self.d,):
            raise ValueError(f"table must have 2^d = {1 << self.d} entries")
        if not np.all(np.isfinite(t)):
            raise ValueError("table entries must be finite")
        object.__setattr__(self, "table", t)

    @classmethod
    def indicator(cls, d: int, members) -> "BooleanFn":
        t = np.zeros(1 << d)
        t[np.asarray(members, dtype=np.int64)] = 1.0
        return cls(d, t)

    def mean(self) -> float:
        return float(self.table.mean())

    def norm(self, p: float) -> float:
        """(E |f|^p)^(1/p) under the uniform measure; p = inf gives max |f|."""
        a = np.abs(self.table)
        if p == math.inf:
            return float(a.max())
        if p <= 0:
            raise ValueError("p must be positive")
        return float(np.mean(a ** p) ** (1.0 / p))

    def inner(self, other: "BooleanFn") -> float:
        return float(np.mean(self.table * other.table))


def popcounts(d: int) -> np.ndarray:
    return np.bitwise_count(np.arange(1 << d, dtype=np.uint64)).astype(np.int64)


def fwht(values: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform: out[S] = sum_x values[x] (-1)^{|S & x|}."""
    a = np.array(values, dtype=np.float64)
    n = a.shape[0]
    d = n.bit_length() - 1
    if 1 << d != n:
        raise ValueError("length must be a power of two")
    h = 1
    while h < n:
        a = a.reshape(-1, 2, h)
        a = np.stack((a[:, 0] + a[:, 1], a[:, 0] - a[:, 1]), axis=1)
        h *= 2
    return a.reshape(n)


def fourier(f: BooleanFn) -> np.ndarray:
    """Fourier coefficients f_hat(S) = E_x f(x) chi_S(x)."""
    return fwht(f.table) / f.table.shape[0]


def noise_operator(f: BooleanFn, sigma: float) -> BooleanFn:
    """T_sigma f: scale each level-k Fourier coefficient by sigma^k."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    coeffs = fourier(f) * np.power(sigma, popcounts(f.d))
    return BooleanFn(f.d, fwht(coeffs))


def noise_operator_direct(f: BooleanFn, sigma: float) -> BooleanFn:
    """T_sigma f by summing over all (x, y) pairs; O(4^d), for cross-checking."""
    d = f.d
    idx = np.arange(1 << d, dtype=np.uint64)
    dist = np.bitwise_count(idx[:, None] ^ idx[None, :]).astype(np.int64)
    stay, move = (1.0 + sigma) / 2.0, (1.0 - sigma) / 2.0
    kernel = stay ** (d - dist) * move ** dist
    return BooleanFn(d, kernel @ f.table)


@dataclass(frozen=True)
class HypercontractiveCheck:
    lhs: float
    rhs: float
    holds: bool

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.holds))


def check_hypercontractive(f: BooleanFn, g: BooleanFn, sigma: float, p: float, q: float) -> HypercontractiveCheck:
    """Compare <T_sigma f, g> with ||f||_p ||g||_q for (p - 1)(q - 1) = sigma^2."""
    if p < 1.0 or q < 1.0:
        raise ValueError("p and q must be >= 1")
    if abs((p - 1.0) * (q - 1.0) - sigma * sigma) > 1e-9:
        raise ValueError(f"(p-1)(q-1)={(p - 1) * (q - 1)} differs from sigma^2={sigma * sigma}")
    if f.d != g.d:
        raise ValueError("dimension mismatch")
    lhs = noise_operator(f, sigma).inner(g)
    rhs = f.norm(p) * g.norm(q)
    return HypercontractiveCheck(lhs, rhs, lhs <= rhs + 1e-12)


# --- robust expansion estimate ------------------------------------------------

@dataclass(frozen=True)
class ExpansionCandidate:
    family: str
    size_a: int
    size_b: int
    achieved_gamma: float

    @property
    def ratio(self) -> float:
        return self.size_b / self.size_a


def hamming_ball_order(d: int) -> np.ndarray:
    """Vertices sorted by distance from vertex 0, ties by index."""
    return np.lexsort((np.arange(1 << d), popcounts(d)))


def minimal_b(d: int, members: np.ndarray, sigma: float, gamma: float) -> tuple[int, float]:
    """Smallest |B| with Pr[x in B | y in A] >= gamma for sigma-correlated (x, y).

    Pr[x in B, y in A] = E[1_B T_sigma 1_A], so B is filled with the vertices
    of largest T_sigma 1_A value first; for a fixed A this is optimal among
    vertex sets.
    """
    a = BooleanFn.indicator(d, members)
    h = noise_operator(a, sigma).table
    order = np.sort(h)[::-1]
    cum = np.cumsum(order) / len(members)
    need = gamma * (1.0 - 1e-12)
    k = int(np.searchsorted(cum, need, side="left")) + 1
    k = min(k, 1 << d)
    return k, float(cum[k - 1])


def expansion_candidates(d: int, sigma: float, a_target: float, gamma: float,
                         random_trials: int = 3, seed: int = 0) -> list[ExpansionCandidate]:
    if d > 16:
        raise ValueError("estimate_robust_expansion supports d <= 16")
    if not 2.0 ** -d <= a_target < 1.0:
        raise ValueError(f"a_target must lie in [2^-d, 1), got {a_target}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    size = max(1, int(round(a_target * (1 << d))))
    out = []
    ball = hamming_ball_order(d)[:size]
    k, got = minimal_b(d, ball, sigma, gamma)
    out.append(ExpansionCandidate("hamming-ball", size, k, got))
    fixed = int(round(-math.log2(a_target)))
    if 0 < fixed <= d:
        idx = np.arange(1 << d)
        cube = idx[(idx & ((1 << fixed) - 1)) == 0]
        k, got = minimal_b(d, cube, sigma, gamma)
        out.append(ExpansionCandidate(f"subcube-{fixed}", len(cube), k, got))
    rng = np.random.default_rng(seed)
    for trial in range(random_trials):
        members = rng.choice(1 << d, size=size, replace=False)
        k, got = minimal_b(d, members, sigma, gamma)
        out.append(ExpansionCandidate(f"random-{trial}", size, k, got))
    return out


def estimate_robust_expansion(d: int, sigma: float, a_target: float, gamma: float,
                              random_trials: int = 3, seed: int = 0) -> float:
    """Smallest mu(B)/mu(A) over the candidate families: an upper estimate of robust expansion."""
    return min(c.ratio for c in expansion_candidates(d, sigma, a_target, gamma, random_trials, seed))
