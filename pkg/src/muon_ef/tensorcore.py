"""Dense matrix arithmetic, the norm/dual-norm catalog, and norm-equivalence constants.

All numerical state is float64. Matrices are plain 2-D numpy arrays; the layered
model state is a thin immutable wrapper around a tuple of such arrays. Every
operation validates finiteness on entry: NaN/Inf never propagates silently.

Norm catalog (``NormKind``): spectral, nuclear, frobenius, entrywise l1/linf,
Schatten-p (p > 1), column-wise mixed l_{p,q}, max-row-sum (the linf->linf
operator norm), and sum-row-max (its dual, the sum of per-row maxima). The
sum-row-max kind exists so that ``dual_of`` is total and involutive on the
catalog; see ``dual_of`` for the pairing table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidMatrixError, SvdConvergenceError, UnsupportedNormError

__all__ = [
    "NormKind",
    "SPECTRAL",
    "NUCLEAR",
    "FROBENIUS",
    "ENTRYWISE_L1",
    "ENTRYWISE_LINF",
    "MAX_ROW_SUM",
    "SUM_ROW_MAX",
    "schatten",
    "column_lpq",
    "norm_kind_from_string",
    "LayeredTensor",
    "NormEquivalence",
    "as_matrix",
    "check_finite",
    "inner",
    "norm",
    "dual_of",
    "svd",
    "norm_equivalence",
]


# ---------------------------------------------------------------------------
# Norm kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormKind:
    """A named matrix norm, with optional exponents for the parametric families.

    ``p``/``q`` are only meaningful for the ``schatten`` and ``column_lpq``
    families; ``math.inf`` is a legal exponent for ``column_lpq``.
    """

    name: str
    p: float | None = None
    q: float | None = None

    def __str__(self) -> str:
        if self.name == "schatten":
            return f"schatten({self.p:g})"
        if self.name == "column_lpq":
            return f"column_lpq({self.p:g},{self.q:g})"
        return self.name


SPECTRAL = NormKind("spectral")
NUCLEAR = NormKind("nuclear")
FROBENIUS = NormKind("frobenius")
ENTRYWISE_L1 = NormKind("l1")
ENTRYWISE_LINF = NormKind("linf")
MAX_ROW_SUM = NormKind("max_row_sum")
SUM_ROW_MAX = NormKind("sum_row_max")


def schatten(p: float) -> NormKind:
    """Schatten p-norm, (sum_i sigma_i^p)^(1/p). Requires p > 1.

    Request the p -> inf limit as SPECTRAL explicitly; schatten(2) evaluates
    identically to FROBENIUS but keeps its own tag.
    """
    if not p > 1:
        raise UnsupportedNormError(f"schatten requires p > 1, got {p}")
    if math.isinf(p):
        raise UnsupportedNormError("schatten(inf) must be requested as SPECTRAL")
    return NormKind("schatten", p=float(p))


def column_lpq(p: float, q: float) -> NormKind:
    """Mixed column norm (sum_j ||X_:j||_p^q)^(1/q). Requires p, q >= 1 (inf allowed)."""
    if not (p >= 1 and q >= 1):
        raise UnsupportedNormError(f"column_lpq requires p, q >= 1, got ({p}, {q})")
    return NormKind("column_lpq", p=float(p), q=float(q))


_SIMPLE_KINDS = {
    "spectral": SPECTRAL,
    "nuclear": NUCLEAR,
    "frobenius": FROBENIUS,
    "l1": ENTRYWISE_L1,
    "linf": ENTRYWISE_LINF,
    "max_row_sum": MAX_ROW_SUM,
    "sum_row_max": SUM_ROW_MAX,
}


def norm_kind_from_string(spec: str) -> NormKind:
    """Parse e.g. 'spectral', 'schatten(3)', 'column_lpq(2,1)' into a NormKind."""
    text = spec.strip().lower()
    if text in _SIMPLE_KINDS:
        return _SIMPLE_KINDS[text]
    if text.startswith("schatten(") and text.endswith(")"):
        return schatten(float(text[len("schatten(") : -1]))
    if text.startswith("column_lpq(") and text.endswith(")"):
        parts = text[len("column_lpq(") : -1].split(",")
        if len(parts) != 2:
            raise UnsupportedNormError(f"bad column_lpq spec: {spec!r}")
        return column_lpq(_parse_exponent(parts[0]), _parse_exponent(parts[1]))
    raise UnsupportedNormError(f"unknown norm kind: {spec!r}")


def _parse_exponent(text: str) -> float:
    text = text.strip()
    return math.inf if text in ("inf", "infinity") else float(text)


# ---------------------------------------------------------------------------
# Matrices and layered tensors
# ---------------------------------------------------------------------------

def as_matrix(values) -> np.ndarray:
    """Coerce to a finite float64 2-D array (no copy when already compliant)."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidMatrixError(f"expected a 2-D matrix, got shape {m.shape}")
    check_finite(m)
    return m


def check_finite(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise InvalidMatrixError("matrix contains NaN or Inf entries")


def inner(a: np.ndarray, b: np.ndarray) -> float:
    """Trace inner product <A, B> = tr(A^T B) = sum of elementwise products."""
    return float(np.sum(a * b))


class LayeredTensor:
    """An ordered, immutable list of matrices: the model state X = [X_1, ..., X_p].

    Shapes are fixed at construction; arithmetic is layerwise and returns new
    instances. Arrays are copied in, so callers cannot mutate internal state.
    """

    __slots__ = ("layers",)

    def __init__(self, layers):
        mats = tuple(as_matrix(l).copy() for l in layers)
        if len(mats) < 1:
            raise InvalidMatrixError("LayeredTensor needs at least one layer")
        object.__setattr__(self, "layers", mats)

    def __setattr__(self, name, value):  # pragma: no cover - immutability guard
        raise AttributeError("LayeredTensor is immutable")

    @classmethod
    def zeros(cls, shapes) -> "LayeredTensor":
        return cls([np.zeros(s) for s in shapes])

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(l.shape for l in self.layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.size for l in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)

    def __add__(self, other: "LayeredTensor") -> "LayeredTensor":
        return LayeredTensor([a + b for a, b in zip(self.layers, other.layers, strict=True)])

    def __sub__(self, other: "LayeredTensor") -> "LayeredTensor":
        return LayeredTensor([a - b for a, b in zip(self.layers, other.layers, strict=True)])

    def __mul__(self, scalar: float) -> "LayeredTensor":
        return LayeredTensor([float(scalar) * a for a in self.layers])

    __rmul__ = __mul__

    def replace_layer(self, i: int, mat: np.ndarray) -> "LayeredTensor":
        mats = list(self.layers)
        mats[i] = mat
        return LayeredTensor(mats)

    def norm2(self) -> float:
        """Euclidean norm of the flattened state."""
        return math.sqrt(sum(float(np.sum(l * l)) for l in self.layers))

    def allclose(self, other: "LayeredTensor", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return all(
            np.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.layers, other.layers, strict=True)
        )

    def max_abs_diff(self, other: "LayeredTensor") -> float:
        return max(
            float(np.max(np.abs(a - b)))
            for a, b in zip(self.layers, other.layers, strict=True)
        )

    def copy(self) -> "LayeredTensor":
        return LayeredTensor(self.layers)

    def __repr__(self) -> str:
        return f"LayeredTensor(shapes={self.shapes})"


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def _singular_values(m: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(str(exc)) from exc


def _vector_pnorm(v: np.ndarray, p: float) -> np.ndarray:
    """p-norm along axis 0, p in [1, inf]."""
    a = np.abs(v)
    if math.isinf(p):
        return a.max(axis=0)
    if p == 1:
        return a.sum(axis=0)
    if p == 2:
        return np.sqrt((a * a).sum(axis=0))
    return (a**p).sum(axis=0) ** (1.0 / p)


def norm(m, kind: NormKind) -> float:
    """Evaluate the norm of a matrix; exact, 0 iff the matrix is zero."""
    m = as_matrix(m)
    if kind.name == "frobenius":
        return float(np.linalg.norm(m))
    if kind.name == "spectral":
        return float(_singular_values(m)[0])
    if kind.name == "nuclear":
        return float(_singular_values(m).sum())
    if kind.name == "l1":
        return float(np.abs(m).sum())
    if kind.name == "linf":
        return float(np.abs(m).max())
    if kind.name == "max_row_sum":
        return float(np.abs(m).sum(axis=1).max())
    if kind.name == "sum_row_max":
        return float(np.abs(m).max(axis=1).sum())
    if kind.name == "schatten":
        s = _singular_values(m)
        return float((s**kind.p).sum() ** (1.0 / kind.p))
    if kind.name == "column_lpq":
        col = _vector_pnorm(m, kind.p)  # one value per column
        if math.isinf(kind.q):
            return float(col.max())
        return float((col**kind.q).sum() ** (1.0 / kind.q))
    raise UnsupportedNormError(f"unknown norm kind {kind!r}")


def _conjugate(p: float) -> float:
    if math.isinf(p):
        return 1.0
    if p == 1.0:
        return math.inf
    return p / (p - 1.0)


def dual_of(kind: NormKind) -> NormKind:
    """Dual norm for the trace inner product; involutive on the catalog.

    Pairings: spectral <-> nuclear, frobenius self-dual, l1 <-> linf,
    schatten(p) <-> schatten(p/(p-1)), column_lpq(p,q) <-> column_lpq(p*,q*)
    with Hoelder conjugates, and max_row_sum <-> sum_row_max. The last pairing
    is the genuinely dual one: the linf->linf operator norm constrains each row
    to the l1 ball, so its dual sums per-row maxima (sampling-verified in the
    test suite).
    """
    if kind.name == "spectral":
        return NUCLEAR
    if kind.name == "nuclear":
        return SPECTRAL
    if kind.name == "frobenius":
        return FROBENIUS
    if kind.name == "l1":
        return ENTRYWISE_LINF
    if kind.name == "linf":
        return ENTRYWISE_L1
    if kind.name == "max_row_sum":
        return SUM_ROW_MAX
    if kind.name == "sum_row_max":
        return MAX_ROW_SUM
    if kind.name == "schatten":
        return schatten(_conjugate(kind.p))
    if kind.name == "column_lpq":
        return column_lpq(_conjugate(kind.p), _conjugate(kind.q))
    raise UnsupportedNormError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------

def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD with a deterministic sign convention.

    Returns (U, sigma, V) with orthonormal columns, sigma sorted descending and
    m = U @ diag(sigma) @ V.T. The largest-magnitude entry of each left
    singular vector is forced nonnegative (ties broken by lowest index), so
    U and V are reproducible across platforms.
    """
    m = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(str(exc)) from exc
    lead = np.argmax(np.abs(u), axis=0)
    flip = u[lead, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    vt[flip, :] *= -1.0
    return u, s, vt.T


# ---------------------------------------------------------------------------
# Norm equivalence with the Euclidean (Frobenius) norm
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormEquivalence:
    """Constants with rho_lower * ||X|| <= ||X||_2 <= rho_upper * ||X|| for the shape."""

    rho_lower: float
    rho_upper: float

    def __post_init__(self):
        if not (0 < self.rho_lower <= self.rho_upper):
            raise InvalidMatrixError(f"bad equivalence pair {self}")


def _vec_ratio_bounds(p: float, dim: int) -> tuple[float, float]:
    """Range of ||v||_2 / ||v||_p over nonzero v in R^dim."""
    if math.isinf(p):
        return 1.0, math.sqrt(dim)
    factor = dim ** (0.5 - 1.0 / p)
    if p <= 2:
        return factor, 1.0  # factor <= 1 here
    return 1.0, factor


def norm_equivalence(kind: NormKind, shape: tuple[int, int]) -> NormEquivalence:
    """Sandwich constants between ``kind`` and the Euclidean norm for a shape.

    Exact (attained) for all single-index families; for column_lpq the pair is
    the product of the two stagewise vector bounds, which is valid though not
    always attained.
    """
    rows, cols = int(shape[0]), int(shape[1])
    if rows < 1 or cols < 1:
        raise InvalidMatrixError(f"bad shape {shape}")
    r = min(rows, cols)
    if kind.name == "frobenius":
        return NormEquivalence(1.0, 1.0)
    if kind.name == "spectral":
        return NormEquivalence(1.0, math.sqrt(r))
    if kind.name == "nuclear":
        return NormEquivalence(1.0 / math.sqrt(r), 1.0)
    if kind.name == "l1":
        return NormEquivalence(1.0 / math.sqrt(rows * cols), 1.0)
    if kind.name == "linf":
        return NormEquivalence(1.0, math.sqrt(rows * cols))
    if kind.name == "max_row_sum":
        # rows live in the l1 ball: ||X||_2 >= rowmax_l1 / sqrt(cols), <= sqrt(rows) * rowmax_l1
        return NormEquivalence(1.0 / math.sqrt(cols), math.sqrt(rows))
    if kind.name == "sum_row_max":
        return NormEquivalence(1.0 / math.sqrt(rows), math.sqrt(cols))
    if kind.name == "schatten":
        lo, hi = _vec_ratio_bounds(kind.p, r)
        return NormEquivalence(lo, hi)
    if kind.name == "column_lpq":
        lo_col, hi_col = _vec_ratio_bounds(kind.p, rows)
        lo_acc, hi_acc = _vec_ratio_bounds(kind.q, cols)
        return NormEquivalence(lo_col * lo_acc, hi_col * hi_acc)
    raise UnsupportedNormError(f"unknown norm kind {kind!r}")
