import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dctsim import codecs
from dctsim.codecs import (
    CodecConfig,
    DpCompressor,
    ErrorBuffer,
    FixedThresholdHook,
    MaskMatrix,
    SketchConfig,
    SketchHook,
    SplitHook,
    ThresholdState,
    ThresholdTraceHook,
    TopKMaskHook,
    XGradTopKHook,
    compress_dp,
    kept_rank,
    mask_backward,
    mask_forward,
    row_thresholds,
    sketch_activations,
    sketch_matrix,
    topk_threshold,
    topk_xgrad_with_ef,
)
from dctsim.errors import MaskLifecycleError, NumericOverflowError, ShapeError


# ---------------------------------------------------------------- threshold

def test_threshold_hand_case():
    x = np.array([0.1, -0.5, 0.3, 0.2])
    tau = topk_threshold(x, 0.5)
    assert tau == 0.2
    kept = x[np.abs(x) >= tau]
    assert set(kept.tolist()) == {-0.5, 0.3, 0.2}


def test_threshold_eta_zero_keeps_all():
    x = np.array([5.0, -1.0, 0.0])
    assert topk_threshold(x, 0.0) == 0.0
    assert np.all(np.abs(x) >= 0.0)


def test_threshold_kept_count_n100():
    rng = np.random.default_rng(0)
    x = rng.permutation(np.arange(1, 101).astype(float))  # distinct magnitudes
    tau = topk_threshold(x, 0.95)
    assert int((np.abs(x) >= tau).sum()) == 6


def test_kept_rank_float_guard():
    # 90 * 0.7 lands at 62.99999999999999 in fp; the rank must still be 63
    assert 90 * 0.7 < 63.0
    assert kept_rank(90, 0.7) == 63
    assert kept_rank(50, 0.58) == 29
    assert kept_rank(100, 0.95) == 95
    assert kept_rank(4, 0.5) == 2
    assert kept_rank(3, 0.25) == 0


def test_row_thresholds_matches_flat_rule_per_row():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 37))
    taus = row_thresholds(x, 0.9)
    for i in range(6):
        assert taus[i] == topk_threshold(x[i], 0.9)


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=64),
    st.sampled_from([0.0, 0.25, 0.5, 0.9, 0.95, 1.0]),
)
def test_threshold_rule_property(xs, eta):
    x = np.array(xs)
    n = x.size
    m = kept_rank(n, eta)
    tau = topk_threshold(x, eta)
    kept = int((np.abs(x) >= tau).sum())
    if m < 1:
        assert tau == 0.0 and kept == n
    else:
        assert tau == np.sort(np.abs(x))[m - 1]
        # >= keeps at least the nominal count; ties only ever add entries
        assert kept >= n - m + 1
        if np.unique(np.abs(x)).size == n:
            assert kept == n - m + 1


# ------------------------------------------------------------- compress_dp

def force_state(tau, k=1):
    # k=1 with a long lifespan so compress_dp reuses tau instead of refreshing
    return ThresholdState(tau=tau, k=k, last_refresh=0)


def test_compress_dp_hand_case():
    w = np.array([1.0, -2.0, 3.0])
    ebuf = ErrorBuffer.zeros(3)
    upd, state, ebuf = compress_dp(w, force_state(2.0), ebuf, CodecConfig(0.5, lifespan=10))
    assert np.array_equal(upd.to_dense().ravel(), [0.0, -2.0, 3.0])
    assert np.array_equal(ebuf.residual, [1.0, 0.0, 0.0])
    assert state.k == 2


def test_compress_dp_lossless_split():
    rng = np.random.default_rng(2)
    cfg = CodecConfig(0.9, lifespan=4)
    state = ThresholdState()
    ebuf = ErrorBuffer.zeros(50)
    for _ in range(13):
        w = rng.standard_normal(50)
        fed = w + ebuf.residual.copy()
        upd, state, ebuf = compress_dp(w, state, ebuf, cfg)
        assert np.array_equal(upd.to_dense().ravel() + ebuf.residual, fed)


def test_compress_dp_refresh_schedule():
    cfg = CodecConfig(0.5, lifespan=3)
    state = ThresholdState()
    ebuf = ErrorBuffer.zeros(8)
    rng = np.random.default_rng(3)
    refreshes = []
    for k in range(6):
        before = state.sort_count
        compress_dp(rng.standard_normal(8), state, ebuf, cfg)
        if state.sort_count != before:
            refreshes.append(k)
    assert refreshes == [0, 3]
    assert state.sort_count == math.ceil(6 / 3)


@pytest.mark.parametrize("iters,lifespan", [(10, 1), (10, 3), (7, 7), (5, 100)])
def test_sort_count_is_ceil_iters_over_lifespan(iters, lifespan):
    cfg = CodecConfig(0.5, lifespan=lifespan)
    state = ThresholdState()
    ebuf = ErrorBuffer.zeros(16)
    rng = np.random.default_rng(4)
    for _ in range(iters):
        compress_dp(rng.standard_normal(16), state, ebuf, cfg)
    assert state.sort_count == math.ceil(iters / lifespan)
    assert state.sorted_elements == state.sort_count * 16


def test_compress_dp_keep_all_is_dense_identity():
    w = np.array([0.5, -0.25, 0.125])
    ebuf = ErrorBuffer.zeros(3)
    upd, state, _ = compress_dp(w, ThresholdState(), ebuf, CodecConfig(0.2))  # floor(3*0.2)=0
    assert upd.encoding == "dense"
    assert np.array_equal(upd.to_dense().ravel(), w)
    assert np.all(ebuf.residual == 0.0)
    assert state.sort_count == 0  # clamp performs no selection


def test_compress_dp_2d_and_index_encoding():
    w = np.array([[1.0, -2.0], [3.0, 0.5]])
    ebuf = ErrorBuffer.zeros((2, 2))
    upd, _, _ = compress_dp(w, force_state(2.0), ebuf, CodecConfig(0.5, lifespan=9))
    assert upd.encoding == "index-list"
    assert upd.shape == (2, 2)
    assert np.array_equal(upd.indices, [1, 2])
    assert np.array_equal(upd.to_dense(), [[0.0, -2.0], [3.0, 0.0]])


def test_compress_dp_nonfinite_rejected():
    ebuf = ErrorBuffer.zeros(2)
    with pytest.raises(NumericOverflowError):
        compress_dp(np.array([1.0, np.inf]), ThresholdState(), ebuf, CodecConfig(0.5))


def test_compress_dp_shape_mismatch():
    with pytest.raises(ShapeError):
        compress_dp(np.ones(3), ThresholdState(), ErrorBuffer.zeros(4), CodecConfig(0.5))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=64))
def test_contraction_property(xs):
    x = np.array(xs)
    n = x.size
    for eta in (0.5, 0.9, 0.95):
        tau = topk_threshold(x, eta)
        mask = np.abs(x) >= tau
        k = int(mask.sum())
        w_hat = np.where(mask, x, 0.0)
        lhs = float(np.sum((x - w_hat) ** 2))
        rhs = (1.0 - k / n) * float(np.sum(x * x))
        assert lhs <= rhs + 1e-12 * max(1.0, rhs)


def test_kept_set_matches_bruteforce_topk():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        x = rng.standard_normal(n)
        for eta in (0.5, 0.9, 0.95):
            m = kept_rank(n, eta)
            tau = topk_threshold(x, eta)
            kept = set(np.flatnonzero(np.abs(x) >= tau).tolist())
            want_count = n if m < 1 else n - m + 1
            oracle = set(np.argsort(np.abs(x), kind="stable")[-want_count:].tolist())
            assert kept == oracle


# ------------------------------------------------------------ MP masking

def test_mask_forward_hand_case():
    x = np.array([[0.0, -0.9, 0.1, 0.5]])
    upd, mm = mask_forward(x, 0.5)
    assert mm.taus[0] == 0.1
    assert np.array_equal(mm.mask, [[False, True, True, True]])
    assert np.array_equal(upd.values, [-0.9, 0.1, 0.5])
    assert np.array_equal(upd.to_dense(), [[0.0, -0.9, 0.1, 0.5]])


def test_mask_forward_keep_all_identity():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 5))
    upd, mm = mask_forward(x, 0.1)  # floor(5*0.1)=0 -> keep all
    assert mm.mask.all()
    out = upd.to_dense()
    assert np.array_equal(out, x)
    assert out.dtype == x.dtype


def test_mask_forward_relu_tie_row():
    # post-relu row, half the entries exactly zero: tau hits 0 and >= keeps all
    x = np.array([[0.0, 0.0, 0.7, 1.3]])
    upd, mm = mask_forward(x, 0.5)
    assert mm.taus[0] == 0.0
    assert mm.mask.all()
    assert upd.kept_count == 4


def test_mask_backward_hand_case():
    mm = MaskMatrix(np.array([[False, True, True, True]]), np.array([0.1]))
    g = np.array([[4.0, 3.0, 2.0, 1.0]])
    upd = mask_backward(g, mm)
    assert np.array_equal(upd.to_dense(), [[0.0, 3.0, 2.0, 1.0]])


def test_mask_backward_zero_grad():
    mm = MaskMatrix(np.array([[True, False]]), np.array([1.0]))
    assert np.all(mask_backward(np.zeros((1, 2)), mm).to_dense() == 0.0)


def test_mask_consumed_exactly_once():
    mm = MaskMatrix(np.ones((1, 2), dtype=bool), np.array([0.0]))
    mask_backward(np.ones((1, 2)), mm)
    with pytest.raises(MaskLifecycleError):
        mask_backward(np.ones((1, 2)), mm)


def test_mask_provenance_token_checked():
    mm = MaskMatrix(np.ones((1, 2), dtype=bool), np.array([0.0]), token=("split0", 7))
    with pytest.raises(MaskLifecycleError):
        mask_backward(np.ones((1, 2)), mm, token=("split0", 8))


def test_mask_backward_shape_mismatch():
    mm = MaskMatrix(np.ones((2, 2), dtype=bool), np.zeros(2))
    with pytest.raises(ShapeError):
        mask_backward(np.ones((2, 3)), mm)


def test_backward_mask_is_forward_mask_bitwise():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 16))
    fwd, mm = mask_forward(x, 0.75)
    bwd = mask_backward(rng.standard_normal((4, 16)), mm)
    assert np.array_equal(fwd.mask, bwd.mask)


# ------------------------------------------------------------- baselines

def test_identity_sketch_passthrough():
    x = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(sketch_activations(x, np.eye(4)), x)


def test_sketch_matrix_seeded_and_scaled():
    cfg = SketchConfig(width=16, seed=42)
    s1 = sketch_matrix(10, cfg)
    s2 = sketch_matrix(10, cfg)
    assert np.array_equal(s1, s2)
    assert s1.shape == (10, 16)


def test_sketch_width_from_compression():
    assert SketchConfig(compression=0.75).sketch_width(512) == 128
    assert SketchConfig(compression=0.9).sketch_width(10) == 1
    assert SketchConfig(width=7).sketch_width(512) == 7


def test_sketch_unbiased_monte_carlo():
    # E[X S S^T] = X for S with iid N(0, 1/s) entries; the empirical mean
    # over 10^4 seeded sketches must land within 2% of X entrywise
    rng = np.random.default_rng(8)
    x = 0.9 + 0.2 * rng.random((2, 4))
    acc = np.zeros_like(x)
    n = 10_000
    for seed in range(n):
        s = sketch_matrix(4, SketchConfig(width=32, seed=seed))
        acc += sketch_activations(x, s) @ s.T
    rel = np.abs(acc / n - x) / np.abs(x)
    assert rel.max() < 0.02


def test_xgrad_topk_keep_all_passthrough():
    g = np.array([[0.3, -0.1]])
    upd, ebuf = topk_xgrad_with_ef(g, 0.3, ErrorBuffer.zeros((1, 2)))  # floor(2*0.3)=0
    assert np.array_equal(upd.to_dense(), g)
    assert np.all(ebuf.residual == 0.0)


def test_xgrad_topk_residual_identity():
    rng = np.random.default_rng(9)
    ebuf = ErrorBuffer.zeros((2, 8))
    for _ in range(5):
        g = rng.standard_normal((2, 8))
        fed = g + ebuf.residual.copy()
        upd, ebuf = topk_xgrad_with_ef(g, 0.9, ebuf)
        assert np.array_equal(upd.to_dense() + ebuf.residual, fed)
        assert upd.encoding == "bitmap"


# ------------------------------------------------------------ error buffer

def test_drain_deterministic():
    eb = ErrorBuffer.zeros(4, drain_interval=5, drain_mode="deterministic")
    eb.residual[:] = 3.0
    assert not eb.maybe_drain(3)
    assert not eb.maybe_drain(0)
    assert eb.maybe_drain(5)
    assert np.all(eb.residual == 0.0)
    assert eb.drains == 1


def test_drain_stochastic_rate():
    rng = np.random.Generator(np.random.PCG64(10))
    eb = ErrorBuffer.zeros(1, drain_interval=4, drain_mode="stochastic", rng=rng)
    hits = sum(eb.maybe_drain(i) for i in range(4000))
    assert 800 < hits < 1200  # expect ~1000 at rate 1/4


def test_drain_disabled():
    eb = ErrorBuffer.zeros(2)
    eb.residual[:] = 1.0
    assert not eb.maybe_drain(100)
    assert np.all(eb.residual == 1.0)


# ------------------------------------------------------------------ hooks

def test_topk_hook_forward_backward_cycle():
    hook = TopKMaskHook(0.5)
    x = np.array([[0.0, -0.9, 0.1, 0.5]])
    out = hook.on_forward(x)
    assert np.array_equal(out, x)  # masked-out entry was already 0
    g = hook.on_backward(np.array([[4.0, 3.0, 2.0, 1.0]]))
    assert np.array_equal(g, [[0.0, 3.0, 2.0, 1.0]])
    assert hook.trace == [0.1]


def test_topk_hook_lifecycle_errors():
    hook = TopKMaskHook(0.5)
    with pytest.raises(MaskLifecycleError):
        hook.on_backward(np.ones((1, 4)))
    hook.on_forward(np.random.default_rng(0).standard_normal((1, 4)))
    with pytest.raises(MaskLifecycleError):
        hook.on_forward(np.ones((1, 4)))  # previous mask never consumed


def test_identity_hook_is_transparent():
    hook = SplitHook()
    x = np.random.default_rng(11).standard_normal((3, 7))
    assert np.array_equal(hook.on_forward(x), x)
    assert np.array_equal(hook.on_backward(x), x)


def test_trace_hook_passes_through():
    hook = ThresholdTraceHook(0.9)
    x = np.random.default_rng(12).standard_normal((5, 10))
    assert np.array_equal(hook.on_forward(x), x)
    assert len(hook.trace) == 1
    assert hook.trace[0] == float(row_thresholds(x, 0.9).mean())


def test_fixed_threshold_hook_masks_uniformly():
    hook = FixedThresholdHook(0.5)
    x = np.array([[0.2, 0.6], [-0.7, 0.1]])
    out = hook.on_forward(x)
    assert np.array_equal(out, [[0.0, 0.6], [-0.7, 0.0]])
    g = hook.on_backward(np.ones((2, 2)))
    assert np.array_equal(g, [[0.0, 1.0], [1.0, 0.0]])


def test_sketch_hook_forward_and_adjoint():
    d = 6
    hook = SketchHook(d, SketchConfig(width=3, seed=1))
    x = np.random.default_rng(13).standard_normal((2, d))
    out = hook.on_forward(x)
    assert np.allclose(out, x @ hook.sk @ hook.sk.T)
    g = np.random.default_rng(14).standard_normal((2, d))
    back = hook.on_backward(g)
    assert np.allclose(back, g @ hook.sk @ hook.sk.T)
    # wire sizes: forward carries B x s, backward carries the full B x d
    assert hook.forward_update(x).shape == (2, 3)
    assert hook.backward_update(g).shape == (2, d)


def test_sketch_hook_redraws_each_forward():
    d = 6
    cfg = SketchConfig(width=3, seed=1)
    hook = SketchHook(d, cfg)
    x = np.random.default_rng(13).standard_normal((2, d))
    first = hook.sk.copy()
    assert np.array_equal(first, sketch_matrix(d, cfg))

    hook.on_forward(x)
    assert np.array_equal(hook.sk, first)       # draw stays live for pairing
    g = np.random.default_rng(14).standard_normal((2, d))
    hook.on_backward(g)
    assert np.array_equal(hook.sk, first)       # backward uses the same draw

    hook.on_forward(x)
    assert not np.array_equal(hook.sk, first)   # next forward redraws

    # the redraw sequence replays exactly from the config seed
    twin = SketchHook(d, SketchConfig(width=3, seed=1))
    twin.on_forward(x)
    twin.on_forward(x)
    assert np.array_equal(twin.sk, hook.sk)


def test_xgrad_hook_forward_untouched_backward_compressed():
    hook = XGradTopKHook(0.5, (1, 4))
    x = np.array([[9.0, 8.0, 7.0, 6.0]])
    assert np.array_equal(hook.on_forward(x), x)
    g = np.array([[0.1, -0.5, 0.3, 0.2]])
    out = hook.on_backward(g)
    assert np.array_equal(out, [[0.0, -0.5, 0.3, 0.2]])
    assert np.array_equal(hook.ebuf.residual, [[0.1, 0.0, 0.0, 0.0]])


def test_dp_compressor_counters_and_timing():
    comp = DpCompressor((32,), CodecConfig(0.9, lifespan=5))
    rng = np.random.default_rng(15)
    for _ in range(12):
        comp.compress(rng.standard_normal(32))
    assert comp.sort_count == math.ceil(12 / 5)
    assert comp.sorted_elements == comp.sort_count * 32
    assert comp.compress_seconds > 0.0


# ------------------------------------------------------------ SparseUpdate

def test_sparse_update_roundtrips_every_encoding():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((5, 9))
    dense = codecs.SparseUpdate.dense(x)
    assert np.array_equal(dense.to_dense(), x)
    mask = rng.random((5, 9)) < 0.3
    bm = codecs.SparseUpdate.from_mask(np.where(mask, x, 0.0), mask)
    assert np.array_equal(bm.to_dense(), np.where(mask, x, 0.0))
    idx = np.flatnonzero(mask.ravel()).astype(np.uint32)
    il = codecs.SparseUpdate.from_indices((5, 9), idx, x.ravel()[idx])
    assert np.array_equal(il.to_dense(), np.where(mask, x, 0.0))


def test_sparse_update_validation():
    with pytest.raises(ValueError):
        codecs.SparseUpdate.from_indices((2, 2), [2, 1], [1.0, 2.0])
    with pytest.raises(ShapeError):
        codecs.SparseUpdate.from_indices((2, 2), [4], [1.0])
    with pytest.raises(ShapeError):
        codecs.SparseUpdate.from_mask(np.ones((2, 2)), np.ones((2, 3), dtype=bool))
