"""Compressors for the two traffic classes of hybrid-parallel training.

Gradient tensors headed for the parameter server are compressed with
magnitude thresholding plus error feedback, where the threshold is
recomputed only every `lifespan` iterations (`compress_dp`).  Activations
crossing a model split are masked per sample, and the forward mask is
reused verbatim on the backward gradient (`mask_forward` / `mask_backward`).
Two known-bad baselines are included for comparison runs: a seeded Gaussian
sketch of the activations and top-k-with-feedback applied to the hidden
gradients instead of the activations.

Threshold rule, used everywhere: for a tensor with N entries and sparsity
factor eta, let m = floor(N * eta).  If m < 1 the threshold is 0 and every
entry is kept.  Otherwise the threshold is the m-th smallest absolute value
(1-indexed) and entries with |x| >= threshold are kept, so with distinct
magnitudes exactly N - m + 1 entries survive.  Ties at the threshold are
all kept.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    MaskLifecycleError,
    NumericOverflowError,
    ShapeError,
)

ENCODINGS = ("dense", "bitmap", "index-list")


def kept_rank(n: int, eta: float) -> int:
    """floor(n * eta) with a guard against float error in the product.

    90 * 0.7 is 62.99999999999999 in binary floating point; a bare floor
    would return 62 where the rule says 63.  Rounding to 9 decimals first
    keeps the product's intended integer value.
    """
    if n < 1:
        raise ShapeError("empty tensor has no threshold rank")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    return int(math.floor(round(n * eta, 9)))


def topk_threshold(x, eta: float) -> float:
    """Magnitude threshold for a tensor under sparsity factor eta.

    Returns 0.0 (keep-all) when floor(N * eta) < 1, otherwise the
    floor(N * eta)-th smallest absolute value.
    """
    a = np.asarray(x)
    m = kept_rank(a.size, eta)
    if m < 1:
        return 0.0
    return kernels.kth_abs_value(a, m)


def row_thresholds(x, eta: float):
    """Per-row magnitude thresholds for a B x d matrix."""
    a = np.asarray(x)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    m = kept_rank(a.shape[1], eta)
    if m < 1:
        return np.zeros(a.shape[0], dtype=a.dtype)
    return kernels.row_kth_abs_value(a, m)


@dataclass
class SparseUpdate:
    """A compressed tensor: original shape plus one of three encodings.

    values are always 1-D in row-major kept order.  dense carries every
    entry, bitmap carries a boolean mask over the full shape, index-list
    carries ascending flat indices into the ravelled tensor.
    """

    rows: int
    cols: int
    encoding: str
    values: np.ndarray
    mask: np.ndarray = None        # bool (rows, cols), bitmap only
    indices: np.ndarray = None     # uint32 ascending, index-list only

    @staticmethod
    def dense(arr) -> "SparseUpdate":
        a = np.asarray(arr)
        r, c = _as_2d_shape(a)
        return SparseUpdate(r, c, "dense", a.ravel().copy())

    @staticmethod
    def from_mask(arr, mask) -> "SparseUpdate":
        a = np.asarray(arr)
        m = np.asarray(mask, dtype=bool)
        if a.shape != m.shape:
            raise ShapeError(f"mask shape {m.shape} != tensor shape {a.shape}")
        r, c = _as_2d_shape(a)
        return SparseUpdate(r, c, "bitmap", a[m].ravel(), mask=m.reshape(r, c))

    @staticmethod
    def from_indices(shape, indices, values) -> "SparseUpdate":
        r, c = shape
        idx = np.asarray(indices, dtype=np.uint32)
        vals = np.asarray(values)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise ShapeError("indices and values must be equal-length vectors")
        if idx.size > 1 and not np.all(idx[1:] > idx[:-1]):
            raise ValueError("indices must be strictly ascending")
        if idx.size and int(idx[-1]) >= r * c:
            raise ShapeError(f"index {int(idx[-1])} out of range for {r}x{c}")
        return SparseUpdate(r, c, "index-list", vals, indices=idx)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def kept_count(self) -> int:
        return int(self.values.size)

    def to_dense(self):
        """Reconstruct the full (rows, cols) tensor exactly."""
        if self.encoding == "dense":
            return self.values.reshape(self.rows, self.cols).copy()
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        if self.encoding == "bitmap":
            out[self.mask] = self.values
        elif self.encoding == "index-list":
            out.ravel()[self.indices.astype(np.int64)] = self.values
        else:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        return out


def _as_2d_shape(a):
    if a.ndim == 1:
        return 1, a.shape[0]
    if a.ndim == 2:
        return a.shape[0], a.shape[1]
    raise ShapeError(f"expected 1-D or 2-D tensor, got shape {a.shape}")


@dataclass
class CodecConfig:
    """Sparsity factor and threshold life-span for one compressed path."""

    eta: float
    lifespan: int = 1

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if int(self.lifespan) != self.lifespan or self.lifespan < 1:
            raise ValueError(f"lifespan must be an integer >= 1, got {self.lifespan}")
        self.lifespan = int(self.lifespan)


@dataclass
class ThresholdState:
    """Reusable threshold for one compressed tensor.

    The threshold is recomputed whenever lifespan divides the iteration
    counter k, with k starting at 0 so the very first call always computes
    one.  sort_count / sorted_elements count actual selection work only;
    the keep-all clamp performs no selection and does not increment them.
    """

    tau: float = 0.0
    k: int = 0
    last_refresh: int = -1
    sort_count: int = 0
    sorted_elements: int = 0


@dataclass
class ErrorBuffer:
    """Residual accumulator for feedback compression, with a drain policy.

    Draining zeroes the residual.  In deterministic mode the buffer drains
    when the supplied counter is a positive multiple of the interval; in
    stochastic mode each call drains with probability 1/interval.
    """

    residual: np.ndarray
    drain_interval: int = 0          # 0 disables draining
    drain_mode: str = "deterministic"
    rng: np.random.Generator = None
    drains: int = 0

    @staticmethod
    def zeros(shape, dtype=np.float64, **kw) -> "ErrorBuffer":
        return ErrorBuffer(np.zeros(shape, dtype=dtype), **kw)

    @property
    def shape(self):
        return self.residual.shape

    def drain(self):
        self.residual[...] = 0.0
        self.drains += 1

    def maybe_drain(self, counter: int) -> bool:
        if self.drain_interval <= 0:
            return False
        if self.drain_mode == "deterministic":
            due = counter > 0 and counter % self.drain_interval == 0
        elif self.drain_mode == "stochastic":
            if self.rng is None:
                raise ValueError("stochastic drain needs an rng")
            due = self.rng.random() < 1.0 / self.drain_interval
        else:
            raise ValueError(f"unknown drain mode {self.drain_mode!r}")
        if due:
            self.drain()
        return due


def compress_dp(w_grad, state: ThresholdState, ebuf: ErrorBuffer, cfg: CodecConfig):
    """Threshold a gradient tensor with error feedback and a reusable tau.

    Adds the residual, refreshes tau when lifespan divides k, keeps entries
    with |w| >= tau, stores the dropped mass back in the buffer, and emits
    the kept entries.  The fed tensor always splits losslessly:
    w + residual_in == emitted + residual_out, entry for entry.

    state and ebuf are updated in place and also returned.
    """
    w = np.asarray(w_grad)
    if ebuf.residual.shape != w.shape:
        raise ShapeError(
            f"error buffer shape {ebuf.residual.shape} != gradient shape {w.shape}"
        )
    fed = w + ebuf.residual
    if not np.all(np.isfinite(fed)):
        raise NumericOverflowError("non-finite gradient after error feedback")

    if state.k % cfg.lifespan == 0:
        m = kept_rank(fed.size, cfg.eta)
        if m < 1:
            state.tau = 0.0
        else:
            state.tau = kernels.kth_abs_value(fed, m)
            state.sort_count += 1
            state.sorted_elements += fed.size
        state.last_refresh = state.k

    mask = np.abs(fed) >= state.tau
    kept = np.where(mask, fed, fed.dtype.type(0.0))
    np.subtract(fed, kept, out=ebuf.residual)
    state.k += 1

    if mask.all():
        upd = SparseUpdate.dense(kept)
    else:
        flat_idx = np.flatnonzero(mask.ravel()).astype(np.uint32)
        upd = SparseUpdate.from_indices(
            _as_2d_shape(w), flat_idx, kept.ravel()[flat_idx.astype(np.int64)]
        )
    return upd, state, ebuf


class MaskMatrix:
    """Per-sample boolean mask from a forward pass, consumed once backward."""

    __slots__ = ("mask", "taus", "token", "consumed")

    def __init__(self, mask, taus, token=None):
        self.mask = mask
        self.taus = taus
        self.token = token
        self.consumed = False

    @property
    def density(self) -> float:
        return float(self.mask.mean())

    def consume(self, token=None):
        if self.consumed:
            raise MaskLifecycleError("forward mask consumed twice")
        if token is not None and self.token is not None and token != self.token:
            raise MaskLifecycleError(
                f"mask belongs to {self.token}, backward asked for {token}"
            )
        self.consumed = True


def mask_forward(x_act, eta: float):
    """Per-row magnitude masking of a B x d activation matrix.

    Each row gets its own threshold; the returned update carries the kept
    values plus the mask itself (the receiver needs it for the backward
    pass), and the MaskMatrix is handed back for that backward application.
    """
    x = np.asarray(x_act)
    if x.ndim != 2:
        raise ShapeError(f"activations must be 2-D, got shape {x.shape}")
    taus = row_thresholds(x, eta)
    mask = np.abs(x) >= taus[:, None]
    mm = MaskMatrix(mask, taus)
    return SparseUpdate.from_mask(np.where(mask, x, x.dtype.type(0.0)), mask), mm


def mask_backward(x_grad, mm: MaskMatrix, token=None) -> SparseUpdate:
    """Apply a forward mask to the split gradient. No new threshold, no feedback."""
    g = np.asarray(x_grad)
    if g.shape != mm.mask.shape:
        raise ShapeError(f"gradient shape {g.shape} != mask shape {mm.mask.shape}")
    mm.consume(token)
    return SparseUpdate.from_mask(np.where(mm.mask, g, g.dtype.type(0.0)), mm.mask)


@dataclass
class SketchConfig:
    """Seeded Gaussian sketch for the activation-sketching baseline.

    width, when set, fixes the sketch output dimension directly; otherwise
    it is derived from the compression fraction (0.75 keeps a quarter of
    the columns).
    """

    compression: float = 0.75
    width: int = 0
    seed: int = 0

    def sketch_width(self, d: int) -> int:
        if self.width:
            return int(self.width)
        if not 0.0 <= self.compression < 1.0:
            raise ValueError(f"compression must be in [0, 1), got {self.compression}")
        return max(1, int(round(d * (1.0 - self.compression))))


def sketch_matrix(d: int, cfg: SketchConfig, dtype=np.float64):
    """The d x s scaled Gaussian sketch S, a pure function of the seed."""
    s = cfg.sketch_width(d)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    return (rng.standard_normal((d, s)) / math.sqrt(s)).astype(dtype, copy=False)


def sketch_activations(x_act, sk):
    """Project activations through a sketch matrix: X -> X @ S."""
    x = np.asarray(x_act)
    if x.ndim != 2 or x.shape[1] != sk.shape[0]:
        raise ShapeError(
            f"cannot sketch shape {x.shape} with a {sk.shape} sketch matrix"
        )
    return x @ sk


def topk_xgrad_with_ef(x_grad, eta: float, ebuf: ErrorBuffer):
    """Feedback top-k on split gradients, threshold refreshed every call.

    Same mechanics as compress_dp with lifespan 1, applied to the hidden
    gradients at a split instead of the parameter gradients.  Exists to
    reproduce the baseline that trains poorly.
    """
    g = np.asarray(x_grad)
    if ebuf.residual.shape != g.shape:
        raise ShapeError(
            f"error buffer shape {ebuf.residual.shape} != gradient shape {g.shape}"
        )
    fed = g + ebuf.residual
    if not np.all(np.isfinite(fed)):
        raise NumericOverflowError("non-finite split gradient after error feedback")
    m = kept_rank(fed.size, eta)
    tau = kernels.kth_abs_value(fed, m) if m >= 1 else 0.0
    mask = np.abs(fed) >= tau
    kept = np.where(mask, fed, fed.dtype.type(0.0))
    np.subtract(fed, kept, out=ebuf.residual)
    return SparseUpdate.from_mask(kept, mask), ebuf


class SplitHook:
    """Identity compressor interface at a model split.

    forward_update / backward_update produce what travels over the wire;
    lift_forward / lift_backward turn a received update back into the dense
    tensor the next layer consumes.  on_forward / on_backward compose the
    two for in-process runs.  Subclasses override the four primitives.
    """

    name = "identity"

    def forward_update(self, x) -> SparseUpdate:
        return SparseUpdate.dense(x)

    def lift_forward(self, upd: SparseUpdate):
        return upd.to_dense()

    def backward_update(self, g) -> SparseUpdate:
        return SparseUpdate.dense(g)

    def lift_backward(self, upd: SparseUpdate):
        return upd.to_dense()

    def on_forward(self, x):
        return self.lift_forward(self.forward_update(x))

    def on_backward(self, g):
        return self.lift_backward(self.backward_update(g))

    def reset(self):
        pass


class TopKMaskHook(SplitHook):
    """Per-sample activation masking with forward-mask reuse on backward."""

    name = "topk-mask"

    def __init__(self, eta: float, record_trace: bool = True):
        self.eta = float(eta)
        self.record_trace = record_trace
        self.trace = []            # mean per-row tau, one entry per forward
        self.density_trace = []
        self.sorted_elements = 0
        self.elements_in = 0
        self.elements_kept = 0
        self._mask = None

    def forward_update(self, x) -> SparseUpdate:
        if self._mask is not None and not self._mask.consumed:
            raise MaskLifecycleError("previous forward mask never consumed")
        upd, mm = mask_forward(x, self.eta)
        self._mask = mm
        if kept_rank(np.asarray(x).shape[1], self.eta) >= 1:
            self.sorted_elements += int(np.asarray(x).size)
        self.elements_in += int(np.asarray(x).size)
        self.elements_kept += upd.kept_count
        if self.record_trace:
            self.trace.append(float(mm.taus.mean()))
            self.density_trace.append(mm.density)
        return upd

    def backward_update(self, g) -> SparseUpdate:
        if self._mask is None:
            raise MaskLifecycleError("backward before any forward")
        upd = mask_backward(g, self._mask)
        self._mask = None
        return upd

    def reset(self):
        self._mask = None


class FixedThresholdHook(SplitHook):
    """Masking with one frozen threshold for every row (probe tool)."""

    name = "fixed-threshold"

    def __init__(self, tau: float):
        self.tau = float(tau)
        self._mask = None

    def forward_update(self, x) -> SparseUpdate:
        x = np.asarray(x)
        mask = np.abs(x) >= self.tau
        taus = np.full(x.shape[0], self.tau, dtype=x.dtype)
        self._mask = MaskMatrix(mask, taus)
        return SparseUpdate.from_mask(np.where(mask, x, x.dtype.type(0.0)), mask)

    def backward_update(self, g) -> SparseUpdate:
        if self._mask is None:
            raise MaskLifecycleError("backward before any forward")
        upd = mask_backward(g, self._mask)
        self._mask = None
        return upd

    def reset(self):
        self._mask = None


class ThresholdTraceHook(SplitHook):
    """Measures per-row thresholds but passes data through untouched."""

    name = "trace-only"

    def __init__(self, eta: float):
        self.eta = float(eta)
        self.trace = []

    def forward_update(self, x) -> SparseUpdate:
        taus = row_thresholds(np.asarray(x), self.eta)
        self.trace.append(float(taus.mean()))
        return SparseUpdate.dense(x)


class SketchHook(SplitHook):
    """Gaussian-sketch baseline: forward sends X @ S_t, backward is exact.

    A fresh S_t is drawn for every forward pass, so the channel is an
    unbiased random projection (E[S S^T] = I) rather than a fixed linear
    bottleneck the surrounding layers could simply learn to invert.  The
    receiving side lifts with S_t^T, so downstream layers see X S_t S_t^T.
    The backward wire carries the full split gradient (this baseline does
    not compress the backward pass); the upstream side applies the same
    iteration's adjoint G S_t S_t^T, pairing forward and backward the way
    mask reuse does.  The draw sequence is a pure function of cfg.seed.
    """

    name = "sketch"

    def __init__(self, d: int, cfg: SketchConfig, dtype=np.float64):
        self.cfg = cfg
        self.d = int(d)
        self.dtype = dtype
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.sk = self._draw()
        self._used = False

    def _draw(self):
        s = self.cfg.sketch_width(self.d)
        return (self.rng.standard_normal((self.d, s))
                / math.sqrt(s)).astype(self.dtype, copy=False)

    def forward_update(self, x) -> SparseUpdate:
        if self._used:
            self.sk = self._draw()
        self._used = True
        return SparseUpdate.dense(sketch_activations(x, self.sk))

    def lift_forward(self, upd: SparseUpdate):
        return upd.to_dense() @ self.sk.T

    def backward_update(self, g) -> SparseUpdate:
        return SparseUpdate.dense(g)

    def lift_backward(self, upd: SparseUpdate):
        return (upd.to_dense() @ self.sk) @ self.sk.T


class XGradTopKHook(SplitHook):
    """Baseline: activations pass untouched, split gradients get top-k + EF."""

    name = "xgrad-topk-ef"

    def __init__(self, eta: float, grad_shape, dtype=np.float64):
        self.eta = float(eta)
        self.ebuf = ErrorBuffer.zeros(grad_shape, dtype=dtype)
        self.elements_in = 0
        self.elements_kept = 0

    def backward_update(self, g) -> SparseUpdate:
        upd, self.ebuf = topk_xgrad_with_ef(g, self.eta, self.ebuf)
        self.elements_in += int(np.asarray(g).size)
        self.elements_kept += upd.kept_count
        return upd

    def reset(self):
        self.ebuf.residual[...] = 0.0


class DpCompressor:
    """Owns threshold state and residual for one gradient tensor.

    Wraps compress_dp with wall-time accounting so life-span sweeps can
    compare the cpu cost of the compression path.
    """

    def __init__(self, shape, cfg: CodecConfig, dtype=np.float64,
                 ebuf: ErrorBuffer = None):
        self.cfg = cfg
        self.state = ThresholdState()
        self.ebuf = ebuf if ebuf is not None else ErrorBuffer.zeros(shape, dtype=dtype)
        if self.ebuf.residual.shape != tuple(shape):
            raise ShapeError("shared error buffer shape mismatch")
        self.compress_seconds = 0.0
        self.elements_in = 0
        self.elements_kept = 0

    def compress(self, w_grad) -> SparseUpdate:
        t0 = time.perf_counter()
        upd, _, _ = compress_dp(w_grad, self.state, self.ebuf, self.cfg)
        self.compress_seconds += time.perf_counter() - t0
        self.elements_in += int(np.asarray(w_grad).size)
        self.elements_kept += upd.kept_count
        return upd

    @property
    def sort_count(self) -> int:
        return self.state.sort_count

    @property
    def sorted_elements(self) -> int:
        return self.state.sorted_elements
