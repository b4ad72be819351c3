"""Exponent algebra and ellipticity statistics for non-uniformly elliptic operators.

A coefficient field a(x) is graded by two scalar functions,

    lambda(x) = inf_xi  xi.a(x)xi / |xi|^2         (smallest coercivity)
    mu(x)     = sup_xi  |a(x)xi|^2 / xi.a(x)xi     (largest flux amplification)

and by integrability exponents p, q with mu in L^p, lambda^{-1} in L^q.
Everything downstream (cutoff construction, local boundedness, Harnack,
corrector bounds) is driven by a handful of derived exponents computed here.

Exponents are kept as exact `fractions.Fraction` values, with infinity as a
dedicated tagged singleton `INF` (never a float sentinel), so that algebraic
identities used in tests hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np


class ParameterError(ValueError):
    """An exponent or dimension argument is outside its documented range."""


class NotEllipticError(ValueError):
    """A coefficient matrix has an indefinite symmetric part."""


class _Infinity:
    """Tagged positive infinity for integrability exponents.

    Formulas branch on `is_inf` explicitly; the arithmetic dunders below exist
    only so that downstream numeric code (ratios, comparisons against floats)
    does not have to special-case the tag.
    """

    _singleton = None

    def __new__(cls):
        if cls._singleton is None:
            cls._singleton = super().__new__(cls)
        return cls._singleton

    def __repr__(self):
        return "INF"

    def __float__(self):
        return math.inf

    def __eq__(self, other):
        return isinstance(other, _Infinity) or (
            isinstance(other, float) and math.isinf(other) and other > 0
        )

    def __hash__(self):
        return hash(math.inf)

    def __gt__(self, other):
        return not isinstance(other, _Infinity)

    def __ge__(self, other):
        return True

    def __lt__(self, other):
        return False

    def __le__(self, other):
        return isinstance(other, _Infinity)

    def __truediv__(self, other):  # INF / x
        if isinstance(other, _Infinity):
            raise ArithmeticError("INF / INF is undefined")
        return INF if other > 0 else -math.inf

    def __rtruediv__(self, other):  # x / INF
        return 0.0

    def __mul__(self, other):
        if other == 0:
            raise ArithmeticError("INF * 0 is undefined")
        return INF if other > 0 else -math.inf

    __rmul__ = __mul__


INF = _Infinity()

Exponent = Union[int, float, Fraction, _Infinity]


def is_inf(x) -> bool:
    """True for the INF tag or an infinite float."""
    return isinstance(x, _Infinity) or (isinstance(x, float) and math.isinf(x))


def as_exponent(x: Exponent, name: str = "exponent", least: Fraction = Fraction(1)) -> Exponent:
    """Normalize to Fraction or INF; reject values below `least`."""
    if is_inf(x):
        return INF
    try:
        v = Fraction(x)
    except (TypeError, ValueError) as e:
        raise ParameterError(f"{name}={x!r} is not a real exponent") from e
    if v < least:
        raise ParameterError(f"{name}={x} must be >= {least}")
    return v


def recip(x: Exponent) -> Fraction:
    """Exact reciprocal with recip(INF) = 0."""
    if is_inf(x):
        return Fraction(0)
    return 1 / Fraction(x)


def check_condition(d: int, p: Exponent, q: Exponent) -> tuple[bool, bool]:
    """Return (sharp_ok, classical_ok) for dimension d and exponents p, q.

    sharp_ok:     1/p + 1/q < 2/(d-1)   (the dimensional-surgery condition)
    classical_ok: 1/p + 1/q < 2/d       (the classical Murat/Trudinger range)
    """
    if not isinstance(d, (int, np.integer)) or d < 2:
        raise ParameterError(f"d={d!r} must be an integer >= 2")
    p = as_exponent(p, "p")
    q = as_exponent(q, "q")
    tot = recip(p) + recip(q)
    return tot < Fraction(2, d - 1), tot < Fraction(2, d)


@dataclass(frozen=True)
class ExponentSet:
    """Derived exponents for one (d, p, q) triple.

    Conventions for degenerate corners: `s` is NaN when delta <= 0 (the
    defining formula needs delta > 0); `kappa` is INF when its reciprocal
    vanishes (d = 2, q = INF) and 0 when p = 1 (reciprocal infinite); kappa
    is only meaningful when classical_ok holds, where kappa > 1.
    """

    d: int
    p: Exponent
    q: Exponent
    p_prime: Exponent
    delta: Fraction
    s: Union[Fraction, float, _Infinity]
    chi: Fraction
    p_star: Fraction
    q_star: Union[Fraction, _Infinity]
    kappa: Union[Fraction, _Infinity]
    sharp_ok: bool
    classical_ok: bool
    borderline: bool


def derive_exponents(d: int, p: Exponent, q: Exponent) -> ExponentSet:
    """Compute the full exponent bookkeeping for (d, p, q), exactly.

    delta  = min{1/(d-1) - 1/(2p), 1/2} - 1/(2q)
    chi    = 1 + delta
    s      = 1 + p'(1 + 1/delta)(1/p + 1/q)
    1/p*   = min{1/2 - 1/(2p) + 1/(d-1), 1}
    q*     = INF if d = 2 and q = INF, else 1/q* = 1/2 + 1/(2q) - 1/d
    1/kappa= p'(1 + 1/q - 2/d)

    The set is returned for every admissible (d, p, q); when sharp_ok fails,
    delta <= 0 and the flags say so.
    """
    sharp_ok, classical_ok = check_condition(d, p, q)
    p = as_exponent(p, "p")
    q = as_exponent(q, "q")
    ip, iq = recip(p), recip(q)
    borderline = (ip + iq) == Fraction(2, d - 1)

    if is_inf(p):
        p_prime: Exponent = Fraction(1)
    elif p == 1:
        p_prime = INF
    else:
        p_prime = p / (p - 1)

    delta = min(Fraction(1, d - 1) - ip / 2, Fraction(1, 2)) - iq / 2
    chi = 1 + delta

    if delta > 0:
        factor = (1 + 1 / delta) * (ip + iq)
        if is_inf(p_prime):
            s: Union[Fraction, float, _Infinity] = INF if factor > 0 else math.nan
        else:
            s = 1 + p_prime * factor
    else:
        s = math.nan

    p_star = 1 / min(Fraction(1, 2) - ip / 2 + Fraction(1, d - 1), Fraction(1))

    if d == 2 and is_inf(q):
        q_star: Union[Fraction, _Infinity] = INF
    else:
        q_star = 1 / (Fraction(1, 2) + iq / 2 - Fraction(1, d))

    ikappa_factor = 1 + iq - Fraction(2, d)
    if is_inf(p_prime):
        kappa: Union[Fraction, _Infinity] = INF if ikappa_factor == 0 else Fraction(0)
    else:
        ikappa = p_prime * ikappa_factor
        kappa = INF if ikappa == 0 else 1 / ikappa

    return ExponentSet(
        d=int(d), p=p, q=q, p_prime=p_prime, delta=delta, s=s, chi=chi,
        p_star=p_star, q_star=q_star, kappa=kappa,
        sharp_ok=sharp_ok, classical_ok=classical_ok, borderline=borderline,
    )


# ---------------------------------------------------------------------------
# pointwise ellipticity of a single matrix


def lambda_mu_of_matrix(a: np.ndarray, tol: float = 1e-12) -> tuple[float, float]:
    """Pointwise (lambda, mu) of one d x d coefficient matrix.

    lambda is the smallest eigenvalue of the symmetric part S.  mu is the
    largest generalized eigenvalue of A^T A against S, restricted to the
    range of S; if A does not vanish on ker S the supremum is genuinely
    infinite and math.inf is returned.  An indefinite symmetric part raises
    NotEllipticError.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"coefficient matrix must be square, got shape {a.shape}")
    s = 0.5 * (a + a.T)
    evals, evecs = np.linalg.eigh(s)
    scale = max(np.max(np.abs(evals)), np.max(np.abs(a)), 1e-300)
    if evals[0] < -tol * scale:
        raise NotEllipticError(
            f"symmetric part is indefinite (min eigenvalue {evals[0]:.3e})"
        )
    lam = float(max(evals[0], 0.0))

    ker = evals <= tol * scale
    if np.any(ker):
        if np.linalg.norm(a @ evecs[:, ker]) > tol * scale:
            return lam, math.inf
        if np.all(ker):  # the zero matrix: no flux at all
            return lam, 0.0
    v = evecs[:, ~ker]
    av = a @ v
    m = av.T @ av
    dhalf = 1.0 / np.sqrt(evals[~ker])
    c = dhalf[:, None] * m * dhalf[None, :]
    mu = float(np.max(np.linalg.eigvalsh(c)))
    return lam, max(mu, lam)


# ---------------------------------------------------------------------------
# per-cell profiles and the conditioning statistic Lambda


@dataclass(frozen=True)
class EllipticityProfile:
    """Per-cell (lambda, mu) on a uniform grid of n^d congruent cells.

    `lam` and `mu` are flat arrays of length n**d in row-major cell order;
    mu entries may be math.inf where the pointwise supremum diverges.
    """

    d: int
    n: int
    box: float  # side length L of the sampling box
    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        if self.lam.shape != (self.n ** self.d,) or self.mu.shape != self.lam.shape:
            raise ParameterError("profile arrays must be flat with length n**d")


def profile_of_field(field) -> EllipticityProfile:
    """Evaluate (lambda, mu) on every cell of a MatrixField.

    Symmetric cells go through a batched eigenvalue solve; the occasional
    non-symmetric cell falls back to lambda_mu_of_matrix.
    """
    vals = field.values.reshape(-1, field.d, field.d)
    asym = vals - np.swapaxes(vals, 1, 2)
    scale = np.maximum(np.max(np.abs(vals), axis=(1, 2)), 1e-300)
    symmetric = np.max(np.abs(asym), axis=(1, 2)) <= 1e-14 * scale

    lam = np.empty(len(vals))
    mu = np.empty(len(vals))
    if np.any(symmetric):
        ev = np.linalg.eigvalsh(vals[symmetric])
        if np.any(ev[:, 0] < -1e-12 * scale[symmetric]):
            bad = int(np.argmax(ev[:, 0] < -1e-12 * scale[symmetric]))
            raise NotEllipticError(f"indefinite symmetric cell (e.g. flat index {bad})")
        lam[symmetric] = np.maximum(ev[:, 0], 0.0)
        mu[symmetric] = ev[:, -1]
    rest = np.flatnonzero(~symmetric)
    for i in rest:
        lam[i], mu[i] = lambda_mu_of_matrix(vals[i])
    return EllipticityProfile(d=field.d, n=field.n, box=field.box, lam=lam, mu=mu)


def mean_power(values: np.ndarray, exponent: Exponent) -> float:
    """Normalized power mean (avg of values**exponent)**(1/exponent) over congruent cells.

    exponent = INF gives the maximum.  For negative exponents a zero value
    makes the mean of values**exponent diverge, so the power mean is 0.0
    (a degenerate cell collapses the harmonic-type mean).
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ParameterError("empty cell set")
    if is_inf(exponent):
        return float(np.max(values))
    e = float(exponent)
    if e < 0 and np.any(values == 0.0):
        return 0.0
    with np.errstate(over="ignore", divide="ignore"):
        m = float(np.mean(values ** e))
        if math.isinf(m):
            return math.inf
        return m ** (1.0 / e)


def lambda_of_region(profile: EllipticityProfile, cells: np.ndarray,
                     p: Exponent, q: Exponent) -> float:
    """Conditioning statistic Lambda(S) = (avg_S mu^p)^(1/p) * (avg_S lambda^-q)^(1/q).

    `cells` is a flat index array selecting the region S.  Degenerate cells
    (lambda = 0 with finite q, or q = INF with inf lambda = 0) and infinite
    mu entries propagate to math.inf, which doubles as the flagged value.
    """
    cells = np.asarray(cells)
    if cells.size == 0:
        raise ParameterError("Lambda of an empty region")
    mu = profile.mu[cells]
    lam = profile.lam[cells]
    if np.any(np.isinf(mu)):
        return math.inf
    mu_part = mean_power(mu, p)
    if is_inf(q):
        lo = float(np.min(lam))
        lam_part = math.inf if lo == 0.0 else 1.0 / lo
    else:
        lam_part = mean_power(lam, -Fraction(q))
        # mean_power with negative exponent already returns the inverted mean:
        # (avg lam^-q)^(1/-q) = (avg lam^-q)^(-1/q); Lambda wants the +1/q power.
        lam_part = math.inf if lam_part == 0.0 else 1.0 / lam_part
    if math.isinf(mu_part) or math.isinf(lam_part):
        return math.inf
    return mu_part * lam_part


def moment_norms(profile: EllipticityProfile, p: Exponent, q: Exponent,
                 cells: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Cell-quadrature norms (||mu||_{L^p(S)}, ||lambda^{-1}||_{L^q(S)}).

    Unlike lambda_of_region these carry the region measure (integrals, not
    averages); p or q = INF gives the cellwise essential sup.  A vanishing
    lambda cell makes the second norm math.inf.
    """
    if cells is None:
        cells = np.arange(profile.lam.size)
    cells = np.asarray(cells)
    if cells.size == 0:
        raise ParameterError("moment norms of an empty region")
    p = as_exponent(p, "p")
    q = as_exponent(q, "q")
    mu = profile.mu[cells]
    lam = profile.lam[cells]
    measure = (profile.box / profile.n) ** profile.d * cells.size

    if is_inf(p):
        mu_norm = float(np.max(mu))
    else:
        mu_norm = mean_power(mu, p) * measure ** (1.0 / float(p))
    if is_inf(q):
        lo = float(np.min(lam))
        lam_norm = math.inf if lo == 0.0 else 1.0 / lo
    else:
        inv = mean_power(lam, -Fraction(q))     # (avg lam^-q)^(-1/q)
        lam_norm = math.inf if inv == 0.0 else measure ** (1.0 / float(q)) / inv
    return mu_norm, lam_norm
