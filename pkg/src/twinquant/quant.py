"""Symmetric uniform and twin uniform quantization, plus the twin-code matmul kernel.

Twin codes are k-bit unsigned integers. The MSB is a range flag (0 selects
R1, 1 selects R2) and the low k-1 bits hold an unsigned level. Range R2 uses
a step that is the R1 step shifted left by ``m`` bits, so products against
R2 codes can be aligned with a shift instead of a multiply.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError

MAX_UNIFORM_BITS = 16
MAX_TWIN_BITS = 8
# Integer-valued f64 products are exact while every partial sum stays below this.
_EXACT_F64 = 2.0**53


class TwinMode(enum.Enum):
    POST_SOFTMAX = "post_softmax"
    POST_GELU = "post_gelu"


@dataclass(frozen=True)
class UniformQuantParams:
    k: int
    delta: float

    def __post_init__(self):
        if not 2 <= self.k <= MAX_UNIFORM_BITS:
            raise ValueError(f"bit-width must be in [2, {MAX_UNIFORM_BITS}], got {self.k}")
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ValueError(f"delta must be positive and finite, got {self.delta}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.k - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.k - 1)) - 1


@dataclass(frozen=True)
class TwinQuantParams:
    """Twin quantizer parameters.

    Only ``delta_r1`` and ``m`` are stored; ``delta_r2`` is derived with an
    exact power-of-two scaling, so ``delta_r2 == 2**m * delta_r1`` holds
    bit-for-bit. Build instances with :meth:`post_softmax` or
    :meth:`post_gelu`.
    """

    k: int
    m: int
    mode: TwinMode
    delta_r1: float

    def __post_init__(self):
        if not 2 <= self.k <= MAX_TWIN_BITS:
            raise ValueError(f"twin bit-width must be in [2, {MAX_TWIN_BITS}], got {self.k}")
        if self.m < 0:
            raise ValueError(f"shift m must be non-negative, got {self.m}")
        if not (math.isfinite(self.delta_r1) and self.delta_r1 > 0):
            raise ValueError(f"delta_r1 must be positive and finite, got {self.delta_r1}")
        if not isinstance(self.mode, TwinMode):
            object.__setattr__(self, "mode", TwinMode(self.mode))
        if self.mode is TwinMode.POST_SOFTMAX and self.delta_r2 != math.ldexp(1.0, 1 - self.k):
            raise ValueError("post-softmax twin quantization requires delta_r2 == 1/2^(k-1)")

    @classmethod
    def post_softmax(cls, k: int, m: int) -> "TwinQuantParams":
        return cls(k, m, TwinMode.POST_SOFTMAX, math.ldexp(1.0, 1 - k - m))

    @classmethod
    def post_gelu(cls, k: int, delta_r2: float, m: int) -> "TwinQuantParams":
        return cls(k, m, TwinMode.POST_GELU, math.ldexp(delta_r2, -m))

    @property
    def delta_r2(self) -> float:
        return math.ldexp(self.delta_r1, self.m)

    @property
    def max_level(self) -> int:
        return (1 << (self.k - 1)) - 1

    @property
    def flag_bit(self) -> int:
        return 1 << (self.k - 1)


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    r = np.floor(a)
    # a - r is exact, unlike a + 0.5 which can round up just below one half
    return np.copysign(r + (a - r >= 0.5), x)


# ---------------------------------------------------------------------------
# symmetric uniform
# ---------------------------------------------------------------------------


def quantize_uniform(x, p: UniformQuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / p.delta)
    return np.clip(q, p.qmin, p.qmax).astype(np.int64)


def quantize_uniform_elementwise(x, delta, k) -> np.ndarray:
    """Same rule as :func:`quantize_uniform` with per-element ``delta`` and ``k`` (broadcast)."""
    delta = np.asarray(delta, dtype=np.float64)
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 2) or np.any(k > MAX_UNIFORM_BITS) or not np.all(delta > 0):
        raise ValueError("need 2 <= k <= 16 and delta > 0 everywhere")
    half = np.left_shift(np.int64(1), k - 1)
    q = round_half_away(np.asarray(x, dtype=np.float64) / delta)
    return np.clip(q, -half, half - 1).astype(np.int64)


def dequantize_uniform(xq, p: UniformQuantParams) -> np.ndarray:
    xq = np.asarray(xq)
    if xq.size and (xq.min() < p.qmin or xq.max() > p.qmax):
        raise FormatError(f"codes outside [{p.qmin}, {p.qmax}] for k={p.k}")
    return xq.astype(np.float64) * p.delta


def fake_quant_uniform(x, p: UniformQuantParams) -> np.ndarray:
    return quantize_uniform(x, p).astype(np.float64) * p.delta


# ---------------------------------------------------------------------------
# twin uniform
# ---------------------------------------------------------------------------


def _nearest_of(x, v1, v2, prefer_r2):
    """Pick the closer of two range candidates; ties go away from zero, then to the primary range."""
    d1 = np.abs(x - v1)
    d2 = np.abs(x - v2)
    take_r2 = (d2 < d1) | ((d2 == d1) & ((np.abs(v2) > np.abs(v1)) | ((v1 == v2) & prefer_r2)))
    return take_r2


def quantize_twin(x, p: TwinQuantParams) -> np.ndarray:
    """Encode ``x`` into k-bit twin codes (uint8).

    Post-softmax: a value is quantized on whichever range holds the nearest
    representable point. The R1 interval ``[0, 2^(k-1)*delta_r1)`` decides
    between equal-valued points. Post-GELU: negatives use R1 (magnitude
    stored, sign implied), zero and positives use R2.
    """
    x = np.asarray(x, dtype=np.float64)
    top = p.max_level
    if p.mode is TwinMode.POST_GELU:
        neg = x < 0
        lvl1 = np.clip(round_half_away(-x / p.delta_r1), 0, top)
        lvl2 = np.clip(round_half_away(x / p.delta_r2), 0, top)
        flag = ~neg
        level = np.where(neg, lvl1, lvl2)
    else:
        lvl1 = np.clip(round_half_away(x / p.delta_r1), 0, top)
        lvl2 = np.clip(round_half_away(x / p.delta_r2), 0, top)
        in_r1 = x < math.ldexp(p.delta_r1, p.k - 1)
        flag = _nearest_of(x, lvl1 * p.delta_r1, lvl2 * p.delta_r2, ~in_r1)
        level = np.where(flag, lvl2, lvl1)
    codes = level.astype(np.uint8) | np.where(flag, p.flag_bit, 0).astype(np.uint8)
    return codes


def split_twin(codes, p: TwinQuantParams):
    codes = np.asarray(codes)
    if codes.size and int(codes.max()) >= (1 << p.k):
        raise FormatError(f"twin code out of range for k={p.k}")
    codes = codes.astype(np.int64)
    return codes >> (p.k - 1), codes & p.max_level


def dequantize_twin(codes, p: TwinQuantParams) -> np.ndarray:
    flag, level = split_twin(codes, p)
    r1 = level * p.delta_r1
    if p.mode is TwinMode.POST_GELU:
        r1 = -r1
    return np.where(flag == 1, level * p.delta_r2, r1)


def twin_signed_levels(codes, p: TwinQuantParams) -> np.ndarray:
    """Integer value of each code in units of ``delta_r1`` (R2 levels pre-shifted by m)."""
    flag, level = split_twin(codes, p)
    r1 = -level if p.mode is TwinMode.POST_GELU else level
    return np.where(flag == 1, level << p.m, r1)


def fake_quant_twin(x, p: TwinQuantParams) -> np.ndarray:
    return dequantize_twin(quantize_twin(x, p), p)


def twin_grid(p: TwinQuantParams) -> np.ndarray:
    """All representable values, one per code (length 2^k, duplicates kept)."""
    return dequantize_twin(np.arange(1 << p.k, dtype=np.uint8), p)


# ---------------------------------------------------------------------------
# integer matmul kernels
# ---------------------------------------------------------------------------


def _acc_bound(a_bits: int, b_max: int, inner: int) -> int:
    return (1 << a_bits) * b_max * inner


def integer_matmul(a_int, b_int) -> np.ndarray:
    """Exact integer matmul with int64 accumulation (broadcast over batch axes)."""
    a_int = np.asarray(a_int, dtype=np.int64)
    b_int = np.asarray(b_int, dtype=np.int64)
    if a_int.shape[-1] != b_int.shape[-2]:
        raise DimensionError(f"integer matmul inner dims differ: {a_int.shape} x {b_int.shape}")
    return np.matmul(a_int, b_int)


def exact_int_product(a_int, b_int) -> np.ndarray:
    """Integer product carried in f64 BLAS when the result is provably exact.

    Falls back to the int64 kernel otherwise. Returns float64 either way.
    """
    a = np.asarray(a_int, dtype=np.float64)
    b = np.asarray(b_int, dtype=np.float64)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"integer matmul inner dims differ: {a.shape} x {b.shape}")
    bound = float(np.abs(a).max(initial=0)) * float(np.abs(b).max(initial=0)) * a.shape[-1]
    if bound < _EXACT_F64:
        return np.matmul(a, b)
    return integer_matmul(a_int, b_int).astype(np.float64)


def uniform_matmul(a_codes, pa: UniformQuantParams, b_codes, pb: UniformQuantParams) -> np.ndarray:
    acc = integer_matmul(a_codes, b_codes)
    return acc.astype(np.float64) * (pa.delta * pb.delta)


def twin_matmul(a_codes, p: TwinQuantParams, b_codes, q: UniformQuantParams) -> np.ndarray:
    """Multiply twin-coded ``a`` by uniform-coded ``b``.

    Each term is ``level(a) * code(b)``; terms whose ``a`` flag is set are
    shifted left by ``m`` and, in post-GELU mode, R1 terms are negated. The
    int64 accumulator is scaled once by ``delta_r1 * delta_b``.
    """
    a_codes = np.asarray(a_codes)
    b_codes = np.asarray(b_codes, dtype=np.int64)
    if a_codes.ndim < 2 or b_codes.ndim < 2 or a_codes.shape[-1] != b_codes.shape[-2]:
        raise DimensionError(f"twin_matmul shapes incompatible: {a_codes.shape} x {b_codes.shape}")
    inner = a_codes.shape[-1]
    if _acc_bound(p.k - 1 + p.m, 1 << (q.k - 1), inner) >= 1 << 63:
        raise OverflowError("int64 accumulator could overflow for these bit-widths")
    acc = np.matmul(twin_signed_levels(a_codes, p), b_codes)
    return acc.astype(np.float64) * (p.delta_r1 * q.delta)


# ---------------------------------------------------------------------------
# TWQ1 code files
# ---------------------------------------------------------------------------

TWQ_MAGIC = b"TWQ1"
_MODE_BYTE = {TwinMode.POST_SOFTMAX: 0, TwinMode.POST_GELU: 1}
_HEADER = struct.Struct("<4sBBBdB")


def pack_twin_codes(codes, p: TwinQuantParams) -> bytes:
    """Serialize twin codes: header, shape, then one code per byte."""
    codes = np.asarray(codes, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(TWQ_MAGIC, p.k, p.m, _MODE_BYTE[p.mode], p.delta_r1, codes.ndim))
    buf.write(struct.pack(f"<{codes.ndim}I", *codes.shape))
    buf.write(np.ascontiguousarray(codes).tobytes())
    return buf.getvalue()


def unpack_twin_codes(blob: bytes):
    if len(blob) < _HEADER.size or blob[:4] != TWQ_MAGIC:
        raise FormatError("not a TWQ1 code buffer")
    magic, k, m, mode, delta_r1, ndim = _HEADER.unpack_from(blob)
    off = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = math.prod(shape)
    if len(blob) - off != count:
        raise FormatError("TWQ1 payload length does not match shape")
    modes = {v: k_ for k_, v in _MODE_BYTE.items()}
    if mode not in modes:
        raise FormatError(f"unknown twin mode byte {mode}")
    p = TwinQuantParams(k, m, modes[mode], delta_r1)
    codes = np.frombuffer(blob, dtype=np.uint8, offset=off).reshape(shape).copy()
    if codes.size and int(codes.max()) >= 1 << k:
        raise FormatError("TWQ1 code exceeds k bits")
    return codes, p


# ---------------------------------------------------------------------------
# operand-level helpers
# ---------------------------------------------------------------------------


def fake_quant(x, p) -> np.ndarray:
    """Quantize then dequantize with either parameter type; ``None`` passes through."""
    if p is None:
        return np.asarray(x, dtype=np.float64)
    if isinstance(p, TwinQuantParams):
        return fake_quant_twin(x, p)
    return fake_quant_uniform(x, p)


def quantized_matmul(a, b, pa=None, pb=None, kernel: str = "integer") -> np.ndarray:
    """``a @ b`` with optional quantization of either operand.

    With both operands quantized and ``kernel="integer"`` the product runs
    on codes (``twin_matmul`` for a twin-coded ``a``); otherwise operands
    are dequantized and multiplied in f64.
    """
    if kernel not in ("integer", "float"):
        raise ValueError(f"unknown kernel {kernel!r}")
    if pa is None and pb is None:
        return np.matmul(a, b)
    if kernel == "integer" and pa is not None and isinstance(pb, UniformQuantParams):
        bq = quantize_uniform(b, pb)
        if isinstance(pa, TwinQuantParams):
            return twin_matmul(quantize_twin(a, pa), pa, bq, pb)
        return uniform_matmul(quantize_uniform(a, pa), pa, bq, pb)
    return np.matmul(fake_quant(a, pa), fake_quant(b, pb))
