"""Contractive compressor catalog with exact bit accounting and wire encoding.

Every compressor maps a dense matrix to a ``CompressedMessage`` whose payload
is one of five variants (dense / sparse / low-rank / natural-packed / zero) and
whose ``bit_cost`` follows the accounting formulas exactly:

    dense      rows * cols * value_bits
    sparse     nnz * (value_bits + index_bits)
    low-rank   rank * (rows + cols + 1) * value_bits   (16-bit when naturalized)
    natural    count * 16  [+ count * index_bits when index list present]
    zero       0

``index_bits`` defaults to ceil(log2(rows * cols)). Natural packing is billed
at 16 bits per element (sign + exponent + framing); the physical encoding below
is denser but the ledger follows this accounting so the relative-cost table is
reproduced exactly.

Canonical byte serialization (little-endian, bit-exact):

    tag u8 | rows u32 | cols u32 | payload
    tag 0 zero      -> (nothing)
    tag 1 dense     -> f64[rows*cols] row-major
    tag 2 sparse    -> nnz u32 | u32[nnz] flat indices | f64[nnz] values
    tag 3 lowrank   -> rank u32 | natural u8 | f64[rows*rank] U | f64[rank] s
                       | f64[rank*cols] V^T
    tag 4 natural   -> count u32 | has_idx u8 | [u32[count] indices]
                       | i8[count] signs | i16[count] exponents
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MalformedPayloadError, NoAnalyticAlphaError
from .tensorcore import NormKind, as_matrix, norm

__all__ = [
    "Identity",
    "TopK",
    "RankK",
    "Natural",
    "TopKSvd",
    "ColumnTopK",
    "RandomDropout",
    "Damping",
    "Composed",
    "CompressorKind",
    "compressor_from_string",
    "is_randomized",
    "CompressedMessage",
    "compress",
    "decompress",
    "bit_cost",
    "default_index_bits",
    "ContractionReport",
    "analytic_alpha",
    "estimate_alpha",
    "static_cost_bits",
    "relative_cost",
]


# ---------------------------------------------------------------------------
# Compressor kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    def __str__(self):
        return "identity"


@dataclass(frozen=True)
class TopK:
    """Keep the k = max(1, round(fraction * size)) largest-magnitude entries."""

    fraction: float

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"topk fraction must be in (0, 1], got {self.fraction}")

    def count(self, shape) -> int:
        return max(1, round(self.fraction * shape[0] * shape[1]))

    def __str__(self):
        return f"topk({self.fraction:g})"


@dataclass(frozen=True)
class RankK:
    """Truncated SVD at rank max(1, round(fraction * min(rows, cols)))."""

    fraction: float

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"rankk fraction must be in (0, 1], got {self.fraction}")

    def rank(self, shape) -> int:
        return max(1, round(self.fraction * min(shape)))

    def __str__(self):
        return f"rankk({self.fraction:g})"


@dataclass(frozen=True)
class Natural:
    """Unbiased randomized rounding of magnitudes to adjacent powers of two."""

    def __str__(self):
        return "natural"


@dataclass(frozen=True)
class TopKSvd:
    """Truncated SVD keeping the k largest singular values (k an absolute count)."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"topk_svd needs k >= 1, got {self.k}")

    def __str__(self):
        return f"topk_svd({self.k})"


@dataclass(frozen=True)
class ColumnTopK:
    """Keep the k columns with largest column l_p norm, zeroing the rest."""

    p: float
    k: int

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"column_topk needs p >= 1, got {self.p}")
        if self.k < 1:
            raise ConfigError(f"column_topk needs k >= 1, got {self.k}")

    def __str__(self):
        return f"column_topk({self.p:g},{self.k})"


@dataclass(frozen=True)
class RandomDropout:
    """Pass the whole matrix with probability prob, else zero."""

    prob: float

    def __post_init__(self):
        if not 0 < self.prob <= 1:
            raise ConfigError(f"dropout prob must be in (0, 1], got {self.prob}")

    def __str__(self):
        return f"dropout({self.prob:g})"


@dataclass(frozen=True)
class Damping:
    """C(X) = gamma * X for gamma in (0, 2); contractive in every norm."""

    gamma: float

    def __post_init__(self):
        if not 0 < self.gamma < 2:
            raise ConfigError(f"damping gamma must be in (0, 2), got {self.gamma}")

    def __str__(self):
        return f"damping({self.gamma:g})"


@dataclass(frozen=True)
class Composed:
    """outer(inner(X)) with nesting depth <= 2; outer must be Natural.

    The only compositions with a sensible joint payload quantize the survivors
    of a selection step: TopK selects and Natural quantizes the selected values;
    RankK/TopKSvd factorize and Natural quantizes every factor entry.
    """

    inner: "CompressorKind"
    outer: "CompressorKind"

    def __post_init__(self):
        if isinstance(self.inner, Composed) or isinstance(self.outer, Composed):
            raise ConfigError("composed compressors cannot nest beyond depth 2")
        if not isinstance(self.outer, Natural):
            raise ConfigError("only composition with a Natural outer stage is supported")

    def __str__(self):
        return f"{self.inner}+{self.outer}"


CompressorKind = (
    Identity
    | TopK
    | RankK
    | Natural
    | TopKSvd
    | ColumnTopK
    | RandomDropout
    | Damping
    | Composed
)


def is_randomized(kind: CompressorKind) -> bool:
    if isinstance(kind, (Natural, RandomDropout)):
        return True
    if isinstance(kind, Composed):
        return is_randomized(kind.inner) or is_randomized(kind.outer)
    return False


def compressor_from_string(spec: str) -> CompressorKind:
    """Parse e.g. 'identity', 'topk(0.25)', 'damping(0.5)', 'topk(0.15)+natural'."""
    text = spec.strip().lower().replace(" ", "")
    if "+" in text:
        inner_text, outer_text = text.split("+", 1)
        return Composed(compressor_from_string(inner_text), compressor_from_string(outer_text))
    if text == "identity":
        return Identity()
    if text == "natural":
        return Natural()
    for prefix, builder in (
        ("topk_svd(", lambda args: TopKSvd(int(args[0]))),
        ("column_topk(", lambda args: ColumnTopK(float(args[0]), int(args[1]))),
        ("topk(", lambda args: TopK(float(args[0]))),
        ("rankk(", lambda args: RankK(float(args[0]))),
        ("dropout(", lambda args: RandomDropout(float(args[0]))),
        ("damping(", lambda args: Damping(float(args[0]))),
    ):
        if text.startswith(prefix) and text.endswith(")"):
            args = text[len(prefix) : -1].split(",")
            try:
                return builder(args)
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"bad compressor spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown compressor spec {spec!r}")


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

_TAGS = {"zero": 0, "dense": 1, "sparse": 2, "lowrank": 3, "natural": 4}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


@dataclass(frozen=True)
class CompressedMessage:
    """Tagged wire unit; ``decompress`` is total and shape-correct for all variants."""

    payload: str
    shape: tuple[int, int]
    values: np.ndarray | None = None
    indices: np.ndarray | None = None
    u: np.ndarray | None = None
    s: np.ndarray | None = None
    vt: np.ndarray | None = None
    signs: np.ndarray | None = None
    exponents: np.ndarray | None = None
    natural_factors: bool = False
    bit_cost: int = 0

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        head = np.array([_TAGS[self.payload]], dtype="<u1").tobytes()
        head += np.array([rows, cols], dtype="<u4").tobytes()
        if self.payload == "zero":
            return head
        if self.payload == "dense":
            return head + self.values.astype("<f8").tobytes()
        if self.payload == "sparse":
            return (
                head
                + np.array([len(self.values)], dtype="<u4").tobytes()
                + self.indices.astype("<u4").tobytes()
                + self.values.astype("<f8").tobytes()
            )
        if self.payload == "lowrank":
            rank = len(self.s)
            return (
                head
                + np.array([rank], dtype="<u4").tobytes()
                + np.array([1 if self.natural_factors else 0], dtype="<u1").tobytes()
                + self.u.astype("<f8").tobytes()
                + self.s.astype("<f8").tobytes()
                + self.vt.astype("<f8").tobytes()
            )
        if self.payload == "natural":
            has_idx = self.indices is not None
            out = head + np.array([len(self.signs)], dtype="<u4").tobytes()
            out += np.array([1 if has_idx else 0], dtype="<u1").tobytes()
            if has_idx:
                out += self.indices.astype("<u4").tobytes()
            out += self.signs.astype("<i1").tobytes()
            out += self.exponents.astype("<i2").tobytes()
            return out
        raise MalformedPayloadError(f"unknown payload {self.payload!r}")

    @classmethod
    def from_bytes(cls, raw: bytes, value_bits: int = 32, index_bits: int | None = None):
        view = memoryview(raw)
        tag = int(np.frombuffer(view[:1], dtype="<u1")[0])
        if tag not in _TAG_NAMES:
            raise MalformedPayloadError(f"unknown payload tag {tag}")
        rows, cols = (int(x) for x in np.frombuffer(view[1:9], dtype="<u4"))
        shape = (rows, cols)
        off = 9
        payload = _TAG_NAMES[tag]
        kwargs = {}
        if payload == "dense":
            n = rows * cols
            kwargs["values"] = np.frombuffer(view[off : off + 8 * n], dtype="<f8").copy()
        elif payload == "sparse":
            nnz = int(np.frombuffer(view[off : off + 4], dtype="<u4")[0])
            off += 4
            kwargs["indices"] = np.frombuffer(view[off : off + 4 * nnz], dtype="<u4").copy()
            off += 4 * nnz
            kwargs["values"] = np.frombuffer(view[off : off + 8 * nnz], dtype="<f8").copy()
        elif payload == "lowrank":
            rank = int(np.frombuffer(view[off : off + 4], dtype="<u4")[0])
            off += 4
            kwargs["natural_factors"] = bool(view[off])
            off += 1
            kwargs["u"] = np.frombuffer(view[off : off + 8 * rows * rank], dtype="<f8").reshape(rows, rank).copy()
            off += 8 * rows * rank
            kwargs["s"] = np.frombuffer(view[off : off + 8 * rank], dtype="<f8").copy()
            off += 8 * rank
            kwargs["vt"] = np.frombuffer(view[off : off + 8 * rank * cols], dtype="<f8").reshape(rank, cols).copy()
        elif payload == "natural":
            count = int(np.frombuffer(view[off : off + 4], dtype="<u4")[0])
            off += 4
            has_idx = bool(view[off])
            off += 1
            if has_idx:
                kwargs["indices"] = np.frombuffer(view[off : off + 4 * count], dtype="<u4").copy()
                off += 4 * count
            kwargs["signs"] = np.frombuffer(view[off : off + count], dtype="<i1").copy()
            off += count
            kwargs["exponents"] = np.frombuffer(view[off : off + 2 * count], dtype="<i2").copy()
        msg = cls(payload=payload, shape=shape, **kwargs)
        return _with_cost(msg, value_bits, index_bits)


def default_index_bits(shape: tuple[int, int]) -> int:
    return max(1, math.ceil(math.log2(shape[0] * shape[1])))


def bit_cost(msg: CompressedMessage, value_bits: int = 32, index_bits: int | None = None) -> int:
    """Exact accounting for a message under the given value/index widths."""
    rows, cols = msg.shape
    if index_bits is None:
        index_bits = default_index_bits(msg.shape)
    if msg.payload == "zero":
        return 0
    if msg.payload == "dense":
        return rows * cols * value_bits
    if msg.payload == "sparse":
        return len(msg.values) * (value_bits + index_bits)
    if msg.payload == "lowrank":
        width = 16 if msg.natural_factors else value_bits
        return len(msg.s) * (rows + cols + 1) * width
    if msg.payload == "natural":
        cost = len(msg.signs) * 16
        if msg.indices is not None:
            cost += len(msg.signs) * index_bits
        return cost
    raise MalformedPayloadError(f"unknown payload {msg.payload!r}")


def _with_cost(msg: CompressedMessage, value_bits: int, index_bits: int | None) -> CompressedMessage:
    cost = bit_cost(msg, value_bits, index_bits)
    return CompressedMessage(
        payload=msg.payload,
        shape=msg.shape,
        values=msg.values,
        indices=msg.indices,
        u=msg.u,
        s=msg.s,
        vt=msg.vt,
        signs=msg.signs,
        exponents=msg.exponents,
        natural_factors=msg.natural_factors,
        bit_cost=cost,
    )


# ---------------------------------------------------------------------------
# Compression / decompression
# ---------------------------------------------------------------------------

def _topk_indices(flat_abs: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on descending magnitude: ties resolve to the lowest index.
    order = np.argsort(-flat_abs, kind="stable")
    return np.sort(order[:k]).astype(np.uint64)


def _natural_round(values: np.ndarray, rng: np.random.Generator):
    """Unbiased power-of-two rounding: returns (signs int8, exponents int16).

    |x| in [2^a, 2^(a+1)) rounds up to 2^(a+1) with probability (|x| - 2^a)/2^a,
    down to 2^a otherwise; exact powers of two are kept; zero maps to zero.
    One uniform draw is consumed per element, in order.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    signs = np.sign(flat).astype(np.int8)
    exponents = np.zeros(flat.size, dtype=np.int16)
    draws = rng.random(flat.size)
    nz = flat != 0.0
    if np.any(nz):
        mant, exp2 = np.frexp(np.abs(flat[nz]))  # |x| = mant * 2^exp2, mant in [0.5, 1)
        low = exp2 - 1
        prob_up = 2.0 * mant - 1.0
        up = draws[nz] < prob_up
        exponents[nz] = (low + up).astype(np.int16)
    return signs, exponents


def _natural_values(signs: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    out = np.ldexp(1.0, exponents.astype(np.int64))
    return out * signs.astype(np.float64)


def _svd_payload(m: np.ndarray, rank: int, natural: bool, rng) -> CompressedMessage:
    from .tensorcore import svd as _svd

    u, s, v = _svd(m)
    rank = min(rank, min(m.shape))
    u, s, vt = u[:, :rank], s[:rank], v[:, :rank].T
    if natural:
        su, eu = _natural_round(u, rng)
        ss, es = _natural_round(s, rng)
        sv, ev = _natural_round(vt, rng)
        u = _natural_values(su, eu).reshape(u.shape)
        s = _natural_values(ss, es)
        vt = _natural_values(sv, ev).reshape(vt.shape)
    return CompressedMessage(
        payload="lowrank", shape=m.shape, u=u.copy(), s=s.copy(), vt=vt.copy(),
        natural_factors=natural,
    )


def compress(
    kind: CompressorKind,
    m,
    rng: np.random.Generator | None = None,
    value_bits: int = 32,
    index_bits: int | None = None,
) -> CompressedMessage:
    """Apply a compressor; randomized kinds consume ``rng``, deterministic ones ignore it."""
    m = as_matrix(m)
    shape = m.shape

    if isinstance(kind, Identity):
        msg = CompressedMessage(payload="dense", shape=shape, values=m.ravel().copy())
    elif isinstance(kind, Damping):
        msg = CompressedMessage(payload="dense", shape=shape, values=(kind.gamma * m).ravel())
    elif isinstance(kind, RandomDropout):
        if rng.random() < kind.prob:
            msg = CompressedMessage(payload="dense", shape=shape, values=m.ravel().copy())
        else:
            msg = CompressedMessage(payload="zero", shape=shape)
    elif isinstance(kind, TopK):
        idx = _topk_indices(np.abs(m).ravel(), kind.count(shape))
        msg = CompressedMessage(
            payload="sparse", shape=shape,
            indices=idx.astype(np.uint32), values=m.ravel()[idx].copy(),
        )
    elif isinstance(kind, ColumnTopK):
        from .tensorcore import _vector_pnorm

        scores = _vector_pnorm(m, kind.p)
        k = min(kind.k, shape[1])
        keep = np.sort(np.argsort(-scores, kind="stable")[:k])
        cols_grid, rows_grid = np.meshgrid(keep, np.arange(shape[0]))
        idx = (rows_grid * shape[1] + cols_grid).ravel()
        idx = np.sort(idx)
        msg = CompressedMessage(
            payload="sparse", shape=shape,
            indices=idx.astype(np.uint32), values=m.ravel()[idx].copy(),
        )
    elif isinstance(kind, RankK):
        msg = _svd_payload(m, kind.rank(shape), natural=False, rng=rng)
    elif isinstance(kind, TopKSvd):
        msg = _svd_payload(m, kind.k, natural=False, rng=rng)
    elif isinstance(kind, Natural):
        signs, exponents = _natural_round(m, rng)
        msg = CompressedMessage(payload="natural", shape=shape, signs=signs, exponents=exponents)
    elif isinstance(kind, Composed):
        msg = _compress_composed(kind, m, rng)
    else:
        raise ConfigError(f"unknown compressor kind {kind!r}")
    return _with_cost(msg, value_bits, index_bits)


def _compress_composed(kind: Composed, m: np.ndarray, rng) -> CompressedMessage:
    inner = kind.inner
    shape = m.shape
    if isinstance(inner, TopK):
        idx = _topk_indices(np.abs(m).ravel(), inner.count(shape))
        signs, exponents = _natural_round(m.ravel()[idx], rng)
        return CompressedMessage(
            payload="natural", shape=shape,
            indices=idx.astype(np.uint32), signs=signs, exponents=exponents,
        )
    if isinstance(inner, (RankK, TopKSvd)):
        rank = inner.rank(shape) if isinstance(inner, RankK) else inner.k
        return _svd_payload(m, rank, natural=True, rng=rng)
    if isinstance(inner, ColumnTopK):
        base = compress(inner, m, rng)
        signs, exponents = _natural_round(base.values, rng)
        return CompressedMessage(
            payload="natural", shape=shape,
            indices=base.indices, signs=signs, exponents=exponents,
        )
    if isinstance(inner, (Identity, Damping, RandomDropout)):
        base = decompress(compress(inner, m, rng))
        if not np.any(base):
            return CompressedMessage(payload="zero", shape=shape)
        signs, exponents = _natural_round(base, rng)
        return CompressedMessage(payload="natural", shape=shape, signs=signs, exponents=exponents)
    raise ConfigError(f"unsupported composition inner stage {inner!r}")


def decompress(msg: CompressedMessage) -> np.ndarray:
    """Exact dense reconstruction of the compressed content C(X)."""
    rows, cols = msg.shape
    if msg.payload == "zero":
        return np.zeros((rows, cols))
    if msg.payload == "dense":
        if msg.values is None or msg.values.size != rows * cols:
            raise MalformedPayloadError("dense payload has wrong element count")
        return msg.values.reshape(rows, cols).copy()
    if msg.payload == "sparse":
        if msg.indices is None or msg.values is None or len(msg.indices) != len(msg.values):
            raise MalformedPayloadError("sparse payload index/value mismatch")
        if np.any(msg.indices >= rows * cols):
            raise MalformedPayloadError("sparse index out of range")
        out = np.zeros(rows * cols)
        out[msg.indices] = msg.values
        return out.reshape(rows, cols)
    if msg.payload == "lowrank":
        if msg.u is None or msg.s is None or msg.vt is None:
            raise MalformedPayloadError("lowrank payload missing factors")
        if msg.u.shape != (rows, len(msg.s)) or msg.vt.shape != (len(msg.s), cols):
            raise MalformedPayloadError("lowrank factor shapes inconsistent")
        return (msg.u * msg.s) @ msg.vt
    if msg.payload == "natural":
        if msg.signs is None or msg.exponents is None or len(msg.signs) != len(msg.exponents):
            raise MalformedPayloadError("natural payload sign/exponent mismatch")
        vals = _natural_values(msg.signs, msg.exponents)
        if msg.indices is None:
            if vals.size != rows * cols:
                raise MalformedPayloadError("natural payload has wrong element count")
            return vals.reshape(rows, cols)
        if np.any(msg.indices >= rows * cols):
            raise MalformedPayloadError("natural index out of range")
        out = np.zeros(rows * cols)
        out[msg.indices] = vals
        return out.reshape(rows, cols)
    raise MalformedPayloadError(f"unknown payload {msg.payload!r}")


# ---------------------------------------------------------------------------
# Contraction parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContractionReport:
    """alpha in (0, 1]; matrix_dependent marks per-input (not uniform) values."""

    alpha: float
    matrix_dependent: bool
    norm_kind: NormKind
    se: float = 0.0


def _schatten_tail_alpha(s: np.ndarray, k: int, p: float) -> float:
    total = float((s**p).sum())
    if total == 0.0:
        return 1.0
    tail = float((s[k:] ** p).sum())
    return 1.0 - (tail / total) ** (2.0 / p)


def analytic_alpha(kind: CompressorKind, m_or_shape, norm_kind: NormKind) -> ContractionReport:
    """Closed-form contraction parameter where one exists.

    Damping/dropout/identity hold in every norm; truncated-SVD kinds need the
    concrete matrix (alpha is matrix-dependent); TopK has only the classical
    Euclidean worst case K/d. Everything else raises NoAnalyticAlphaError.
    """
    if isinstance(kind, Identity):
        return ContractionReport(1.0, False, norm_kind)
    if isinstance(kind, Damping):
        return ContractionReport(1.0 - (1.0 - kind.gamma) ** 2, False, norm_kind)
    if isinstance(kind, RandomDropout):
        return ContractionReport(kind.prob, False, norm_kind)

    if isinstance(kind, TopK):
        if norm_kind.name == "frobenius" or (
            norm_kind.name == "column_lpq" and norm_kind.p == 2 and norm_kind.q == 2
        ):
            shape = m_or_shape.shape if hasattr(m_or_shape, "shape") else tuple(m_or_shape)
            d = shape[0] * shape[1]
            return ContractionReport(kind.count(shape) / d, False, norm_kind)
        raise NoAnalyticAlphaError(f"TopK has no stated alpha under {norm_kind}")

    if isinstance(kind, (TopKSvd, RankK)):
        if not hasattr(m_or_shape, "shape"):
            raise NoAnalyticAlphaError("truncated-SVD alpha is matrix-dependent; pass the matrix")
        m = as_matrix(m_or_shape)
        k = kind.k if isinstance(kind, TopKSvd) else kind.rank(m.shape)
        s = np.linalg.svd(m, compute_uv=False)
        if norm_kind.name == "spectral":
            if s[0] == 0.0:
                return ContractionReport(1.0, True, norm_kind)
            tail = float(s[k]) if k < len(s) else 0.0
            return ContractionReport(1.0 - (tail / float(s[0])) ** 2, True, norm_kind)
        if norm_kind.name == "nuclear":
            return ContractionReport(_schatten_tail_alpha(s, k, 1.0), True, norm_kind)
        if norm_kind.name == "frobenius":
            return ContractionReport(_schatten_tail_alpha(s, k, 2.0), True, norm_kind)
        if norm_kind.name == "schatten":
            return ContractionReport(_schatten_tail_alpha(s, k, norm_kind.p), True, norm_kind)
        raise NoAnalyticAlphaError(f"truncated SVD has no stated alpha under {norm_kind}")

    if isinstance(kind, ColumnTopK):
        if norm_kind.name != "column_lpq" or norm_kind.p != kind.p:
            raise NoAnalyticAlphaError(
                f"column top-k alpha needs a column_lpq norm with matching p, got {norm_kind}"
            )
        if not hasattr(m_or_shape, "shape"):
            raise NoAnalyticAlphaError("column top-k alpha is matrix-dependent; pass the matrix")
        from .tensorcore import _vector_pnorm

        m = as_matrix(m_or_shape)
        q = norm_kind.q
        scores = _vector_pnorm(m, kind.p)
        total = float((scores**q).sum())
        if total == 0.0:
            return ContractionReport(1.0, True, norm_kind)
        keep = np.sort(np.argsort(-scores, kind="stable")[: min(kind.k, m.shape[1])])
        dropped = np.setdiff1d(np.arange(m.shape[1]), keep)
        tail = float((scores[dropped] ** q).sum())
        return ContractionReport(1.0 - (tail / total) ** (2.0 / q), True, norm_kind)

    raise NoAnalyticAlphaError(f"no analytic alpha for {kind} under {norm_kind}")


def estimate_alpha(
    kind: CompressorKind,
    norm_kind: NormKind,
    sampler,
    trials: int,
    rng: np.random.Generator,
    num_samples: int = 50,
) -> ContractionReport:
    """Empirical contraction parameter: 1 - max over samples of E||C(X) - X||^2 / ||X||^2.

    ``sampler(rng)`` draws input matrices; the expectation runs over ``trials``
    compressor draws per sample (one draw when the kind is deterministic). The
    reported ``se`` is the standard error of the worst sample's mean ratio.
    """
    if trials < 100:
        raise ValueError("need trials >= 100 for a stable expectation")
    draws = trials if is_randomized(kind) else 1
    worst_ratio, worst_se = 0.0, 0.0
    dependent = isinstance(kind, (TopKSvd, RankK, ColumnTopK, Composed))
    for _ in range(num_samples):
        x = as_matrix(sampler(rng))
        denom = norm(x, norm_kind) ** 2
        if denom == 0.0:
            continue
        ratios = np.empty(draws)
        for t in range(draws):
            err = decompress(compress(kind, x, rng)) - x
            ratios[t] = norm(err, norm_kind) ** 2 / denom
        mean = float(ratios.mean())
        se = float(ratios.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0
        if mean > worst_ratio:
            worst_ratio, worst_se = mean, se
    return ContractionReport(1.0 - worst_ratio, dependent, norm_kind, se=worst_se)


# ---------------------------------------------------------------------------
# Static cost model (no matrices involved; used by the accounting command)
# ---------------------------------------------------------------------------

def static_cost_bits(kind: CompressorKind, shape: tuple[int, int], value_bits: int = 32) -> float:
    """Per-round wire bits for one matrix of ``shape``, from the payload formulas.

    RandomDropout is billed at its expected cost prob * dense.
    """
    rows, cols = shape
    d = rows * cols
    ib = default_index_bits(shape)
    if isinstance(kind, (Identity, Damping)):
        return d * value_bits
    if isinstance(kind, RandomDropout):
        return kind.prob * d * value_bits
    if isinstance(kind, Natural):
        return d * 16
    if isinstance(kind, TopK):
        return kind.count(shape) * (value_bits + ib)
    if isinstance(kind, RankK):
        return kind.rank(shape) * (rows + cols + 1) * value_bits
    if isinstance(kind, TopKSvd):
        return min(kind.k, min(shape)) * (rows + cols + 1) * value_bits
    if isinstance(kind, ColumnTopK):
        return min(kind.k, cols) * rows * (value_bits + ib)
    if isinstance(kind, Composed):
        inner = kind.inner
        if isinstance(inner, TopK):
            return inner.count(shape) * (16 + ib)
        if isinstance(inner, RankK):
            return inner.rank(shape) * (rows + cols + 1) * 16
        if isinstance(inner, TopKSvd):
            return min(inner.k, min(shape)) * (rows + cols + 1) * 16
        if isinstance(inner, ColumnTopK):
            return min(inner.k, cols) * rows * (16 + ib)
        if isinstance(inner, (Identity, Damping)):
            return d * 16
        if isinstance(inner, RandomDropout):
            return inner.prob * d * 16
    raise ConfigError(f"no static cost model for {kind!r}")


def relative_cost(kind: CompressorKind, shapes, value_bits: int = 32) -> float:
    """Cost relative to sending every matrix dense at ``value_bits`` precision.

    ``shapes`` is a list of (rows, cols) or (rows, cols, count) tuples.
    """
    total_bits = 0.0
    dense_bits = 0.0
    for entry in shapes:
        rows, cols = int(entry[0]), int(entry[1])
        count = int(entry[2]) if len(entry) > 2 else 1
        total_bits += count * static_cost_bits(kind, (rows, cols), value_bits)
        dense_bits += count * rows * cols * value_bits
    return total_bits / dense_bits
