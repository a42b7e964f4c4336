"""Named self-check suites, each a battery of oracle comparisons.

Suites: contraction, topk-oracle, roundtrip, gradcheck, theorem-probe,
ef-convergence.  Each returns (ok, report lines) and stays well under a
minute; the CLI maps a failure to exit code 3.
"""

import numpy as np

from .codecs import (
    CodecConfig,
    ErrorBuffer,
    SparseUpdate,
    ThresholdState,
    compress_dp,
    kept_rank,
    topk_threshold,
)
from .data import DatasetSpec, make_dataset
from .kernels import kth_abs_value
from .nn import Batch, LayerGraph, ModelParams, backward, forward, init_params
from .runtime import run_sync, theorem_probe
from .wire import WireMessage, decode, encode, encoded_length


def _std_suites():
    return {
        "contraction": contraction,
        "topk-oracle": topk_oracle,
        "roundtrip": roundtrip,
        "gradcheck": gradcheck,
        "theorem-probe": theorem_probe_suite,
        "ef-convergence": ef_convergence,
    }


def suite_names():
    return sorted(_std_suites())


def run_suite(name: str, seed: int = 0):
    """Run one named suite; returns (ok, lines). Unknown names raise KeyError."""
    return _std_suites()[name](seed=seed)


# ---------------------------------------------------------------- contraction

def single_shot_compress(x, eta):
    """One compress_dp call with fresh state and an empty residual."""
    x = np.asarray(x, dtype=np.float64)
    state = ThresholdState()
    ebuf = ErrorBuffer.zeros(x.shape)
    upd, state, _ = compress_dp(x, state, ebuf, CodecConfig(eta, lifespan=1))
    return upd, state


def check_contraction_case(x, eta):
    """Returns (ok, detail) for one vector against both oracle properties."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    upd, _ = single_shot_compress(x, eta)
    dense = upd.to_dense().reshape(x.shape)
    k = upd.kept_count

    lhs = float(np.sum((x - dense) ** 2))
    rhs = (1.0 - k / n) * float(np.sum(x ** 2))
    if lhs > rhs + 1e-12 * max(1.0, float(np.sum(x ** 2))):
        return False, f"contraction violated: {lhs} > {rhs} (n={n}, eta={eta})"

    m = kept_rank(n, eta)
    if m < 1:
        expect = np.ones(n, dtype=bool)
    else:
        tau = np.sort(np.abs(x.ravel()))[m - 1]
        expect = np.abs(x.ravel()) >= tau
    got = dense.ravel() != 0.0
    # a kept entry may itself be 0.0; compare against the mask semantics
    if upd.encoding == "dense":
        got = np.ones(n, dtype=bool)
    elif upd.encoding == "index-list":
        got = np.zeros(n, dtype=bool)
        got[upd.indices.astype(np.int64)] = True
    if not np.array_equal(got, expect):
        return False, f"kept set mismatch vs sort oracle (n={n}, eta={eta})"
    return True, ""


def contraction(seed: int = 0, cases: int = 3000):
    rng = np.random.Generator(np.random.PCG64(seed))
    etas = [0.5, 0.9, 0.95]
    for i in range(cases):
        n = int(rng.integers(1, 65))
        x = rng.normal(size=n)
        if i % 7 == 0 and n >= 4:   # exercise tie handling
            x[: n // 2] = x[0]
        ok, detail = check_contraction_case(x, etas[i % len(etas)])
        if not ok:
            return False, [f"case {i}: {detail}"]
    return True, [f"contraction: {cases} randomized vectors satisfy "
                  "the energy bound and match the sort oracle"]


# ---------------------------------------------------------------- topk-oracle

def topk_oracle(seed: int = 0, cases: int = 2000):
    rng = np.random.Generator(np.random.PCG64(seed))
    lines = []

    tau = topk_threshold(np.array([0.1, -0.5, 0.3, 0.2]), 0.5)
    if tau != 0.2:
        return False, [f"pinned case: expected tau 0.2, got {tau}"]
    lines.append("pinned 4-element case: tau = 0.2")

    if kept_rank(90, 0.7) != 63 or kept_rank(50, 0.58) != 29:
        return False, ["kept_rank product guard failed on 90*0.7 or 50*0.58"]
    lines.append("kept_rank float guard: 90*0.7 -> 63, 50*0.58 -> 29")

    for i in range(cases):
        n = int(rng.integers(1, 200))
        k = int(rng.integers(1, n + 1))
        x = rng.normal(size=n) * 10.0 ** rng.integers(-3, 4)
        want = float(np.sort(np.abs(x))[k - 1])
        got = kth_abs_value(x, k)
        if got != want:
            return False, [f"case {i}: kth_abs_value({n=}, {k=}) {got} != {want}"]
    lines.append(f"kth_abs_value matches full-sort oracle on {cases} vectors")
    return True, lines


# ------------------------------------------------------------------ roundtrip

def roundtrip(seed: int = 0, cases: int = 400):
    rng = np.random.Generator(np.random.PCG64(seed))
    for i in range(cases):
        rows = int(rng.integers(1, 40))
        cols = int(rng.integers(1, 40))
        x = rng.normal(size=(rows, cols)).astype(np.float32)
        style = i % 3
        if style == 0:
            upd = SparseUpdate.dense(x)
        elif style == 1:
            upd = SparseUpdate.from_mask(x, rng.random((rows, cols)) < 0.3)
        else:
            n_kept = int(rng.integers(0, rows * cols + 1))
            idx = np.sort(rng.choice(rows * cols, size=n_kept,
                                     replace=False)).astype(np.uint32)
            upd = SparseUpdate.from_indices((rows, cols), idx,
                                            x.ravel()[idx.astype(np.int64)])
        msg = WireMessage("param-grad", i, 0, upd)
        frame = encode(msg)
        if len(frame) != encoded_length(upd):
            return False, [f"case {i}: frame length {len(frame)} != closed form "
                           f"{encoded_length(upd)}"]
        back = decode(frame)
        if back.update.encoding != upd.encoding or \
                not np.array_equal(back.update.to_dense(), upd.to_dense()):
            return False, [f"case {i}: decode(encode(.)) changed the update"]
    return True, [f"roundtrip: {cases} frames re-decode identically and "
                  "match the closed-form lengths"]


# ------------------------------------------------------------------ gradcheck

def numeric_grad(params, graph, batch, eps=1e-5):
    tensors = [t for _, t in params.named_tensors()]
    grads = []
    for t in tensors:
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            keep = t[ix]
            t[ix] = keep + eps
            lp, _ = forward(params, graph, batch)
            t[ix] = keep - eps
            lm, _ = forward(params, graph, batch)
            t[ix] = keep
            g[ix] = (lp - lm) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b)) / denom)


def gradcheck_case(rng, max_width=6, max_depth=3):
    depth = int(rng.integers(1, max_depth + 1))
    dims = [int(rng.integers(1, max_width + 1)) for _ in range(depth + 1)]
    loss = "bce" if rng.random() < 0.5 else "mse"
    graph = LayerGraph.mlp(dims, hidden="sigmoid",
                           final="sigmoid" if loss == "bce" else None, loss=loss)
    params = init_params(graph, int(rng.integers(1 << 30)))
    bsz = int(rng.integers(1, 5))
    x = rng.normal(size=(bsz, dims[0]))
    if loss == "bce":
        y = (rng.random((bsz, dims[-1])) < 0.5).astype(float)
    else:
        y = rng.normal(size=(bsz, dims[-1]))
    batch = Batch(x, y)
    _, st = forward(params, graph, batch)
    grads, _ = backward(params, graph, batch, st)
    worst = 0.0
    for (name, g), num in zip(grads.named_tensors(),
                              numeric_grad(params, graph, batch)):
        worst = max(worst, max_rel_err(g, num))
    return worst


def gradcheck(seed: int = 0, nets: int = 8):
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = max(gradcheck_case(rng) for _ in range(nets))
    ok = worst < 1e-4
    return ok, [f"gradcheck: {nets} random networks, max relative error "
                f"{worst:.3e} (tolerance 1e-4)"]


# -------------------------------------------------------------- theorem probe

def probe_instance(eps: float, seed: int = 5):
    """A 2-worker split instance whose mask-mean assumption holds exactly.

    Six samples.  Two sign-mirrored all-O(eps) pairs (labels 1/1 and 0/0)
    have per-row threshold eps; one mirrored large pair has threshold
    3*eps, putting the mean threshold strictly between them, so the
    dynamic and mean-threshold masks disagree exactly on coordinate 1 of
    the small rows (activation +-eps).  Mirroring cancels the first-order
    gradient difference within each pair; the bias path, which mirroring
    alone cannot cancel, cancels between the two opposite-label pairs.
    The surviving gap is second order in eps.
    """
    d = 8
    pa = np.array([0.5, 1.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
    pc = np.array([0.5, 1.0, 9.0, 2.0, 5.0, 3.0, 7.0, 4.0])
    big = np.array([0.4 * eps, 3.0 * eps, 2.0, 3.0, 4.0, 5.0, 2.5, 3.5])
    x = np.vstack([eps * pa, -eps * pa, eps * pc, -eps * pc, big, -big])
    y = np.array([[1.0], [1.0], [0.0], [0.0], [1.0], [0.0]])

    graph = LayerGraph.mlp([d, d, 1], hidden="linear", final="sigmoid",
                           loss="bce", splits=(1,))
    rng = np.random.Generator(np.random.PCG64(seed))
    params = init_params(graph, seed)
    params.weights[0][...] = np.eye(d)     # producer passes raw coordinates
    params.biases[0][...] = 0.0
    params.weights[1][...] = rng.normal(size=(d, 1))
    params.biases[1][...] = 0.0
    return params, graph, x, y


def probe_scaling_case(eps: float, seed: int = 5):
    params, graph, x, y = probe_instance(eps, seed)
    return theorem_probe(params, graph, x, y, eta=0.25)


def theorem_probe_suite(seed: int = 0):
    lines = []

    # identical samples: every row shares one threshold, gap is exactly zero
    graph = LayerGraph.mlp([4, 6, 1], hidden="relu", final="sigmoid",
                           loss="bce", splits=(1,))
    params = init_params(graph, 3)
    x = np.tile(np.array([[0.3, -1.2, 0.7, 2.0]]), (8, 1))
    y = np.ones((8, 1))
    rep = theorem_probe(params, graph, x, y, eta=0.5)
    if rep.assumption_residual != 0.0 or rep.discrepancy != 0.0:
        return False, [f"identical-sample case: residual {rep.assumption_residual}, "
                       f"discrepancy {rep.discrepancy}, expected exact zeros"]
    lines.append("identical samples: residual and discrepancy exactly 0")

    rng = np.random.Generator(np.random.PCG64(seed))
    xr = rng.normal(size=(16, 4))
    yr = (rng.random((16, 1)) < 0.5).astype(float)
    rep = theorem_probe(params, graph, xr, yr, eta=0.0)
    if rep.discrepancy != 0.0:
        return False, [f"keep-all case: discrepancy {rep.discrepancy}, expected 0"]
    lines.append("keep-all masking: discrepancy exactly 0")

    eps = 2.0 ** -10
    full = probe_scaling_case(eps)
    half = probe_scaling_case(eps / 2)
    if full.assumption_residual > 1e-10 or half.assumption_residual > 1e-10:
        return False, [f"constructed instance: residual {full.assumption_residual} "
                       f"/ {half.assumption_residual} above 1e-10"]
    ratio = full.discrepancy / half.discrepancy
    lines.append(f"perturbation scaling: residual {full.assumption_residual:.1e}, "
                 f"discrepancy({eps:g})/discrepancy({eps / 2:g}) = {ratio:.3f}")
    if not 3.5 <= ratio <= 4.5:
        return False, lines + ["second-order decay ratio outside [3.5, 4.5]"]
    return True, lines


# -------------------------------------------------------------- ef-convergence

def least_squares_instance(seed: int = 11, d: int = 6, samples: int = 48):
    data = make_dataset(DatasetSpec(
        kind="synthetic-regression", dims=d, samples=samples, seed=seed,
        test_fraction=0.125, noise=0.05, targets=1))
    n = data.train_x.shape[0]
    x1 = np.hstack([data.train_x, np.ones((n, 1))])
    w_star, *_ = np.linalg.lstsq(x1, data.train_y, rcond=None)
    return data, w_star.ravel()


def ef_distance(data, w_star, eta, lifespan, steps, lr=0.05, seed=1, **kw):
    """Full-batch DP-compressed descent; distance to the closed form."""
    graph = LayerGraph.mlp([data.train_x.shape[1], 1], loss="mse")
    dp = CodecConfig(eta, lifespan=lifespan) if eta is not None else None
    res = run_sync(graph, data, steps=steps, lr=lr,
                   batch_size=data.train_x.shape[0], seed=seed, dp=dp, **kw)
    fitted = np.concatenate([res.final_params.weights[0].ravel(),
                             res.final_params.biases[0]])
    return float(np.max(np.abs(fitted - w_star))), res


def ef_convergence(seed: int = 0):
    data, w_star = least_squares_instance()
    dist_c, _ = ef_distance(data, w_star, eta=0.99, lifespan=100, steps=4000)
    dist_u, _ = ef_distance(data, w_star, eta=None, lifespan=1, steps=4000)
    lines = [f"compressed (eta=0.99, lifespan=100): |w - w*| = {dist_c:.3e}",
             f"uncompressed baseline:               |w - w*| = {dist_u:.3e}"]
    ok = dist_c < 1e-6 and dist_u < 1e-6
    if not ok:
        lines.append("distance tolerance 1e-6 exceeded")
    return ok, lines
