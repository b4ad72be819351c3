"""Coefficient fields: deterministic families, random ensembles, averages, file I/O.

A MatrixField holds one d x d coefficient matrix per grid cell, constant on
the cell.  Random ensembles are scalar (a = omega * Id) with omega drawn from
the heavy-tailed Pareto mixture

    omega = Pareto(p0)      with probability 1/2   (upper tail, omega >= 1)
    omega = 1/Pareto(q0)    with probability 1/2   (lower tail, omega <= 1)

so that omega in L^p iff p < p0 and omega^{-1} in L^q iff q < q0.  Draws use
the counter-based Philox generator keyed by the FieldSpec seed; each cell's
uniforms sit at a fixed counter offset, so realizations are independent of
iteration order and reproducible across processes.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import _grid
from .exponents import (Exponent, ParameterError, is_inf, lambda_mu_of_matrix,
                        profile_of_field)

MODES = ("box", "torus")
_MODE_BYTE = {"box": 0, "torus": 1}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}

FIELD_MAGIC = b"DHL1"
_FIELD_HEADER = struct.Struct("<IIBd")  # d, n, mode byte, box side


@dataclass(eq=False)
class MatrixField:
    """Piecewise-constant d x d coefficient field on an n^d grid over [-L/2, L/2]^d.

    values has shape (n**d, d, d), row-major in the cell index.
    """

    d: int
    n: int
    box: float
    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d < 1 or self.n < 1 or not self.box > 0:
            raise ParameterError("field needs d >= 1, n >= 1, box > 0")
        expect = (self.n ** self.d, self.d, self.d)
        if self.values.shape != expect:
            raise ParameterError(f"values shape {self.values.shape} != {expect}")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("field values must be finite")

    @property
    def h(self) -> float:
        return self.box / self.n

    def cell_centers(self) -> np.ndarray:
        return _grid.cell_centers(self.d, self.n, self.box)

    def cells_in_ball(self, center, radius: float) -> np.ndarray:
        return _grid.cells_in_ball(self.d, self.n, self.box, center, radius,
                                   periodic=(self.mode == "torus"))

    def is_symmetric(self, tol: float = 1e-14) -> bool:
        asym = self.values - np.swapaxes(self.values, 1, 2)
        scale = max(float(np.max(np.abs(self.values))), 1e-300)
        return float(np.max(np.abs(asym))) <= tol * scale


@dataclass(frozen=True)
class FieldSpec:
    """Recipe for one random coefficient field: geometry, family, tails, seed."""

    d: int
    n: int
    family: str = "iid-pareto-mixture"
    p0: float = math.inf  # upper tail index: mu in L^p iff p < p0
    q0: float = math.inf  # lower tail index: lambda^{-1} in L^q iff q < q0
    block: int = 1        # side of constant blocks, in cells
    seed: int = 0
    box: Optional[float] = None  # defaults to n (unit cells)

    def __post_init__(self):
        if self.family != "iid-pareto-mixture":
            raise ParameterError(f"unknown random family {self.family!r}")
        if not (self.p0 > 0 and self.q0 > 0):
            raise ParameterError("tail indices p0, q0 must be positive")
        if self.n % self.block != 0:
            raise ParameterError(f"block {self.block} must divide n {self.n}")

    @property
    def side(self) -> float:
        return float(self.n) if self.box is None else float(self.box)


# ---------------------------------------------------------------------------
# deterministic families


def make_constant(d: int, n: int, a, box: float = 2.0, mode: str = "box") -> MatrixField:
    """Constant coefficient field a(x) = A; A must have PSD symmetric part."""
    a = np.asarray(a, dtype=float)
    lambda_mu_of_matrix(a)  # raises NotEllipticError on an indefinite input
    values = np.broadcast_to(a, (n ** d, d, d)).copy()
    return MatrixField(d=d, n=n, box=box, mode=mode, values=values)


@dataclass(frozen=True)
class RadialMembership:
    """Integrability of |x|^alpha near its singular point, on any bounded ball."""

    d: int
    alpha: Fraction

    def weight_in_lp(self, p: Exponent) -> bool:
        """|x|^alpha in L^p(B_1) iff alpha*p > -d (alpha >= 0 when p = INF)."""
        if is_inf(p):
            return self.alpha >= 0
        return self.alpha * Fraction(p) > -self.d

    def inverse_in_lq(self, q: Exponent) -> bool:
        """|x|^{-alpha} in L^q(B_1) iff alpha*q < d (alpha <= 0 when q = INF)."""
        if is_inf(q):
            return self.alpha <= 0
        return self.alpha * Fraction(q) < self.d


def make_radial_power(d: int, n: int, alpha: float, center=None, box: float = 2.0,
                      mode: str = "box") -> tuple[MatrixField, RadialMembership]:
    """Scalar field a(x) = |x - x0|^alpha * Id sampled at cell centers.

    The singular point must not coincide with a cell center (use even n for a
    centered singularity).  Returns the field together with the exact
    integrability predicates of the weight and its inverse.
    """
    if center is None:
        center = np.zeros(d)
    center = np.asarray(center, dtype=float)
    if np.any(np.abs(center) > box / 2):
        raise ParameterError("radial center must lie inside the box")
    r = np.linalg.norm(_grid.cell_centers(d, n, box) - center, axis=1)
    if alpha < 0 and np.min(r) == 0.0:
        raise ParameterError("singular point hits a cell center; shift it or use even n")
    omega = r ** float(alpha)
    values = omega[:, None, None] * np.eye(d)
    fieldv = MatrixField(d=d, n=n, box=box, mode=mode, values=values)
    return fieldv, RadialMembership(d=d, alpha=Fraction(alpha))


def make_checkerboard(d: int, n: int, low: float, high: float, box: Optional[float] = None,
                      mode: str = "box") -> MatrixField:
    """Two-phase scalar checkerboard alternating by cell-index parity.

    n must be even so the pattern tiles periodically.
    """
    if n % 2 != 0:
        raise ParameterError("checkerboard needs even n to tile periodically")
    if not (low > 0 and high > 0):
        raise ParameterError("checkerboard phases must be positive")
    idx = np.indices((n,) * d).reshape(d, -1)
    parity = idx.sum(axis=0) % 2
    omega = np.where(parity == 0, low, high).astype(float)
    values = omega[:, None, None] * np.eye(d)
    side = float(n) if box is None else float(box)
    return MatrixField(d=d, n=n, box=side, mode=mode, values=values)


# ---------------------------------------------------------------------------
# random ensembles


def _mixture_scalars(seed: int, count: int, p0: float, q0: float) -> np.ndarray:
    """`count` iid mixture draws; draw k sits at a fixed Philox counter slot."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    u = gen.random((count, 2))
    # (1-u)^(-1/p0) is Pareto(p0) on [1, inf); the reciprocal branch mirrors it.
    upper = (1.0 - u[:, 1]) ** (-1.0 / p0)
    lower = (1.0 - u[:, 1]) ** (+1.0 / q0)
    return np.where(u[:, 0] < 0.5, upper, lower)


def sample_random(spec: FieldSpec, mode: str = "box") -> MatrixField:
    """Draw the scalar field of `spec`: a = omega * Id, constant on block^d blocks."""
    blocks_per_side = spec.n // spec.block
    omega = _mixture_scalars(spec.seed, blocks_per_side ** spec.d, spec.p0, spec.q0)
    if spec.block > 1:
        shaped = omega.reshape((blocks_per_side,) * spec.d)
        for axis in range(spec.d):
            shaped = np.repeat(shaped, spec.block, axis=axis)
        omega = shaped.ravel()
    values = omega[:, None, None] * np.eye(spec.d)
    return MatrixField(d=spec.d, n=spec.n, box=spec.side, mode=mode, values=values)


def periodize(field: MatrixField, box: Optional[float] = None) -> MatrixField:
    """Same cell values on the torus of the same side length."""
    if box is not None and not math.isclose(box, field.box):
        raise ParameterError(f"periodize box {box} != field box {field.box}")
    return MatrixField(d=field.d, n=field.n, box=field.box, mode="torus",
                       values=field.values.copy())


# ---------------------------------------------------------------------------
# ensemble moments: exact values and Monte-Carlo references


def exact_moment(spec: FieldSpec, power: float) -> float:
    """E[omega^power] for the Pareto mixture; math.inf outside (-q0, p0).

    E[omega^r] = ( p0/(p0-r) + q0/(q0+r) ) / 2 with the obvious limits as a
    tail index goes to infinity.
    """
    r = float(power)
    p0, q0 = spec.p0, spec.q0
    upper = 1.0 if math.isinf(p0) else (math.inf if r >= p0 else p0 / (p0 - r))
    lower = 1.0 if math.isinf(q0) else (math.inf if r <= -q0 else q0 / (q0 + r))
    return 0.5 * (upper + lower)


def mc_moment(spec: FieldSpec, power: float, samples: int = 200_000,
              seed_offset: int = 0x5EED) -> tuple[float, float]:
    """Monte-Carlo estimate (mean, standard error) of E[omega^power]."""
    draws = _mixture_scalars(spec.seed + seed_offset, samples, spec.p0, spec.q0)
    vals = draws ** float(power)
    mean = float(np.mean(vals))
    stderr = float(np.std(vals) / math.sqrt(samples))
    return mean, stderr


@dataclass(frozen=True)
class ErgodicAverages:
    """Window averages of a pointwise ellipticity power against the ensemble mean."""

    kind: str                 # "mu_p" or "lambda_mq"
    exponent: float
    z: tuple
    radii: tuple
    averages: tuple           # avg over B_R(R z) per R, periodic tiling
    reference: float          # Monte-Carlo E[.]
    ref_stderr: float


def ergodic_average(spec, kind: str, exponent: float, z,
                    radii) -> ErgodicAverages:
    """Averages of mu^p (kind="mu_p") or lambda^{-q} (kind="lambda_mq") over
    balls B_R(Rz) of one realization, with an ensemble reference.

    `spec` is either a FieldSpec (one realization is drawn, the reference is
    Monte-Carlo) or a MatrixField treated as one period of a stationary tiling
    (the reference is the exact spatial mean).  Balls wrap periodically when
    they exit the sampled box.
    """
    if kind not in ("mu_p", "lambda_mq"):
        raise ParameterError(f"kind must be 'mu_p' or 'lambda_mq', got {kind!r}")
    power = float(exponent) if kind == "mu_p" else -float(exponent)
    if isinstance(spec, MatrixField):
        fieldv = spec if spec.mode == "torus" else periodize(spec)
        prof = profile_of_field(fieldv)
        vals = (prof.mu if kind == "mu_p" else prof.lam) ** power
        ref, err = float(np.mean(vals)), 0.0
    else:
        fieldv = sample_random(spec, mode="torus")
        omega = fieldv.values[:, 0, 0]
        vals = omega ** power
        ref, err = mc_moment(spec, power)
    z = np.asarray(z, dtype=float)
    averages = []
    for r_ball in radii:
        cells = fieldv.cells_in_ball(r_ball * z, r_ball)
        if cells.size == 0:
            raise ParameterError(f"window R={r_ball} contains no cells")
        averages.append(float(np.mean(vals[cells])))
    return ErgodicAverages(kind=kind, exponent=float(exponent), z=tuple(z),
                           radii=tuple(float(r) for r in radii),
                           averages=tuple(averages), reference=ref, ref_stderr=err)


# ---------------------------------------------------------------------------
# binary field files ("DHL1")


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_field(field: MatrixField, path: str) -> None:
    """Write magic 'DHL1', <u32 d, u32 n, u8 mode, f64 box>, then cell-major
    row-major little-endian f64 matrix entries."""
    header = FIELD_MAGIC + _FIELD_HEADER.pack(field.d, field.n,
                                              _MODE_BYTE[field.mode], field.box)
    _atomic_write(path, header + field.values.astype("<f8").tobytes())


def read_field(path: str) -> MatrixField:
    """Inverse of write_field; validates magic, mode byte and payload size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FIELD_MAGIC:
        raise ParameterError(f"{path}: bad magic {blob[:4]!r}, want {FIELD_MAGIC!r}")
    d, n, mode_byte, box = _FIELD_HEADER.unpack_from(blob, 4)
    if mode_byte not in _BYTE_MODE:
        raise ParameterError(f"{path}: unknown boundary-mode byte {mode_byte}")
    body = blob[4 + _FIELD_HEADER.size:]
    count = n ** d * d * d
    if len(body) != 8 * count:
        raise ParameterError(f"{path}: payload {len(body)} bytes, want {8 * count}")
    values = np.frombuffer(body, dtype="<f8").astype(float).reshape(n ** d, d, d)
    return MatrixField(d=d, n=n, box=box, mode=_BYTE_MODE[mode_byte], values=values)
