"""Training orchestration: parameter server, wired splits, sync/async loops.

One trainer is a chain of model-partition workers separated by split
points; activations and split gradients cross those boundaries through
links, and the finished parameter gradients travel (optionally compressed)
to a parameter server that applies raw SGD.  run_sync drives one trainer
deterministically; run_async drives several update streams against the
shared server from threads, tolerating stale pulls and lost-update races
on the shared error buffer (values are never torn; the server serializes
its own applies).

Precision is run-level: 64-bit runs deliver update objects in process and
meter closed-form frame sizes; 32-bit runs serialize every message for
real and may use the loopback socket transport.
"""

import copy
import threading
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .codecs import (
    CodecConfig,
    DpCompressor,
    ErrorBuffer,
    FixedThresholdHook,
    SparseUpdate,
    SplitHook,
    TopKMaskHook,
    row_thresholds,
)
from .data import BatchStream, Dataset
from .errors import DctsimError, PartitionError, ShapeError, StalenessError
from .nn import Batch, LayerGraph, ModelParams, backward, evaluate, forward, init_params
from .wire import ChannelMeter, CostModel, WireMessage, make_link


# ----------------------------------------------------------------- topology

@dataclass(frozen=True)
class NodeRole:
    name: str
    role: str                 # parameter-server | mp-worker | trainer-aggregator
    partition: tuple = ()     # (first layer, one past last), mp workers only
    peers: tuple = ()


def partitions_from_splits(n_layers: int, splits):
    bounds = [0] + list(splits) + [n_layers]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def validate_partitions(graph: LayerGraph, parts):
    """Partitions must tile the layer range with splits on the boundaries."""
    n = len(graph.layers)
    cursor = 0
    interior = []
    for lo, hi in parts:
        if lo != cursor or hi <= lo:
            raise PartitionError(f"partition ({lo}, {hi}) breaks the tiling at {cursor}")
        cursor = hi
        if hi != n:
            interior.append(hi)
    if cursor != n:
        raise PartitionError(f"partitions end at {cursor}, graph has {n} layers")
    if tuple(interior) != tuple(graph.splits):
        raise PartitionError(
            f"partition boundaries {interior} do not match splits {list(graph.splits)}"
        )


def build_topology(graph: LayerGraph, trainers: int = 1):
    parts = partitions_from_splits(len(graph.layers), graph.splits)
    validate_partitions(graph, parts)
    nodes = {"server": NodeRole("server", "parameter-server")}
    for t in range(trainers):
        worker_names = tuple(f"trainer{t}/worker{w}" for w in range(len(parts)))
        nodes[f"trainer{t}"] = NodeRole(
            f"trainer{t}", "trainer-aggregator", peers=("server",) + worker_names
        )
        for w, part in enumerate(parts):
            nodes[worker_names[w]] = NodeRole(
                worker_names[w], "mp-worker", partition=part,
                peers=(f"trainer{t}",),
            )
    return nodes


# ------------------------------------------------------------------- server

def _apply_to(target, upd: SparseUpdate, lr: float):
    if upd.encoding == "dense":
        target -= lr * upd.to_dense().reshape(target.shape)
    elif upd.encoding == "bitmap":
        target[upd.mask.reshape(target.shape)] -= lr * upd.values
    elif upd.encoding == "index-list":
        if upd.indices.size:
            flat = target.ravel()
            flat[upd.indices.astype(np.int64)] -= lr * upd.values
    else:
        raise ShapeError(f"unknown encoding {upd.encoding!r}")


class ParameterServer:
    """Authoritative parameters plus an audit log of every applied update.

    version counts applied update batches (one per training iteration).
    Applies and pulls are serialized by one lock, so snapshots are
    consistent; staleness comes from pulls racing pushes, not from torn
    reads.
    """

    def __init__(self, params: ModelParams, lr: float, audit: bool = True):
        self.params = params
        self.lr = float(lr)
        self.version = 0
        self.names = [name for name, _ in params.named_tensors()]
        self._tensors = [t for _, t in params.named_tensors()]
        self.audit_log = [] if audit else None
        self._lock = threading.Lock()

    def tensor_id(self, name: str) -> int:
        return self.names.index(name)

    def apply_update(self, tensor_id: int, upd: SparseUpdate, lr: float = None):
        """Apply one tensor update outside the batch path (version unchanged)."""
        lr = self.lr if lr is None else lr
        with self._lock:
            self._apply_one(tensor_id, upd, lr)

    def _apply_one(self, tensor_id, upd, lr):
        if not 0 <= tensor_id < len(self._tensors):
            raise ShapeError(f"unknown tensor id {tensor_id}")
        target = self._tensors[tensor_id]
        if upd.rows * upd.cols != target.size:
            raise ShapeError(
                f"update for {upd.rows}x{upd.cols}, tensor {self.names[tensor_id]} "
                f"has {target.size} entries"
            )
        _apply_to(target, upd, lr)
        if self.audit_log is not None:
            self.audit_log.append((self.version, tensor_id, lr, upd))

    def apply_batch(self, updates, lr: float = None) -> int:
        """Apply one iteration's updates atomically; returns the new version."""
        lr = self.lr if lr is None else lr
        with self._lock:
            self.version += 1
            for tensor_id, upd in updates:
                self._apply_one(tensor_id, upd, lr)
            return self.version

    def pull(self):
        with self._lock:
            return self.params.copy(), self.version

    def snapshot_tensors(self):
        """(version, list of tensor copies) under one lock."""
        with self._lock:
            return self.version, [t.copy() for t in self._tensors]

    def replay(self, initial: ModelParams) -> ModelParams:
        """Fold the audit log over initial params; equals live params exactly."""
        if self.audit_log is None:
            raise ValueError("server was built without an audit log")
        out = initial.copy()
        tensors = [t for _, t in out.named_tensors()]
        with self._lock:
            log = list(self.audit_log)
        for _version, tensor_id, lr, upd in log:
            _apply_to(tensors[tensor_id], upd, lr)
        return out

    def audit_frames(self):
        """Applied updates as wire frames (f32 values only, so 32-bit runs)."""
        if self.audit_log is None:
            raise ValueError("server was built without an audit log")
        from .wire import encode
        with self._lock:
            log = list(self.audit_log)
        for version, tensor_id, _lr, upd in log:
            yield encode(WireMessage("param-grad", version, tensor_id, upd))


# ---------------------------------------------------------------- wired split

class WiredSplit(SplitHook):
    """Runs an inner hook's updates through forward/backward links."""

    def __init__(self, inner: SplitHook, split_id: int, fwd_link, bwd_link):
        self.inner = inner
        self.split_id = split_id
        self.fwd = fwd_link
        self.bwd = bwd_link
        self.iteration = 0

    def on_forward(self, x):
        upd = self.inner.forward_update(x)
        self.fwd.send(WireMessage("activation-fwd", self.iteration, self.split_id, upd))
        return self.inner.lift_forward(self.fwd.recv().update)

    def on_backward(self, g):
        upd = self.inner.backward_update(g)
        self.bwd.send(WireMessage("grad-bwd", self.iteration, self.split_id, upd))
        return self.inner.lift_backward(self.bwd.recv().update)


# ------------------------------------------------------------------- results

@dataclass
class RunResult:
    rows: list
    final_params: ModelParams
    meter: ChannelMeter
    server: ParameterServer
    hooks: dict                   # stream 0: split position -> inner hook
    compressors: dict             # stream 0: tensor name -> DpCompressor
    staleness: list
    clamped: int
    sorted_elements: int
    compress_seconds: float
    simulated_time: float
    summary: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        fixed = ["stream", "iteration", "loss", "accuracy", "test_loss",
                 "test_acc", "staleness", "ef_norm", "sent_bytes"]
        extra = sorted({k for row in self.rows for k in row} - set(fixed))
        cols = fixed + extra
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(_csv_cell(row.get(c)) for c in cols))
        return "\n".join(lines) + "\n"


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# ---------------------------------------------------------------- run driver

def _nominal_reduction(n: int, eta: float) -> float:
    from .codecs import kept_rank
    m = kept_rank(n, eta)
    return n / (n - m) if m >= 1 else 1.0


def _reduction_summary(graph, shapes, names, dp, wired_hooks, comps,
                       batch_size, steps, streams, sent_bytes):
    """Advertised and measured compression factors plus final tau traces."""
    from .wire import HEADER_BYTES
    out = {}
    nominals = []
    elements_in = elements_kept = 0

    if dp is not None:
        out["dp_eta"] = dp.eta
        out["dp_lifespan"] = dp.lifespan
        for name, shape in zip(names, shapes):
            n = int(np.prod(shape))
            nom = _nominal_reduction(n, dp.eta)
            out[f"element_reduction_nominal:{name}"] = nom
            nominals.append(nom)
        if comps:
            elements_in += sum(c.elements_in for c in comps.values())
            elements_kept += sum(c.elements_kept for c in comps.values())
            for name, comp in comps.items():
                out[f"final_tau:{name}"] = comp.state.tau

    mp_etas = []
    for pos in sorted(wired_hooks):
        inner = wired_hooks[pos].inner
        w = graph.split_width(pos)
        eta = getattr(inner, "eta", None)
        if eta is not None:
            mp_etas.append(eta)
            nom = _nominal_reduction(w, eta)
            out[f"element_reduction_nominal:split{pos}"] = nom
            nominals.append(nom)
        sk = getattr(inner, "sk", None)
        if sk is not None:
            out[f"element_reduction_nominal:split{pos}"] = w / sk.shape[1]
            nominals.append(w / sk.shape[1])
        if getattr(inner, "elements_in", 0):
            elements_in += inner.elements_in
            elements_kept += inner.elements_kept
        if getattr(inner, "trace", None):
            out[f"final_tau:split{pos}"] = inner.trace[-1]

    taus = [v for k, v in out.items() if k.startswith("final_tau:")]
    if taus:
        out["final_tau_mean"] = float(np.mean(taus))
    if nominals:
        out["element_reduction_nominal"] = min(nominals)
    if elements_in:
        out["element_reduction_measured"] = (
            elements_in / elements_kept if elements_kept else float("inf"))

    # what the same message pattern costs with every payload sent dense
    per_tensor = sum(HEADER_BYTES + 4 * int(np.prod(s)) for s in shapes)
    per_split = sum(2 * (HEADER_BYTES + 4 * batch_size * graph.split_width(pos))
                    for pos in wired_hooks)
    dense_bytes = steps * streams * (2 * per_tensor + per_split)
    out["dense_bytes"] = dense_bytes
    out["byte_ratio"] = dense_bytes / sent_bytes if sent_bytes else 1.0

    eta = mp_etas[0] if mp_etas else (dp.eta if dp is not None else 0.0)
    out["eta"] = eta
    return out


def _hook_for(factory, width, dtype):
    hook = factory(width, dtype) if callable(factory) else factory
    if not isinstance(hook, SplitHook):
        raise ShapeError(f"split hook factory returned {type(hook).__name__}")
    return hook


def _eval_taps(wired_hooks):
    """Evaluation taps matching the training-time split pipeline.

    A model trained through split compressors is scored through the same
    compressors: that is the function the deployed partitioned model
    computes.  Deep copies keep evaluation forwards out of the live hooks'
    traces and counters.
    """
    if not wired_hooks:
        return None
    return {pos: copy.deepcopy(h.inner) for pos, h in wired_hooks.items()}


def _pull_params(server, graph, link, dtype):
    """Server pushes every tensor dense over the link; trainer rebuilds."""
    version, tensors = server.snapshot_tensors()
    for tid, arr in enumerate(tensors):
        link.send(WireMessage("model-push", version, tid, SparseUpdate.dense(arr)))
    got = [link.recv().update for _ in tensors]
    weights, biases = [], []
    for i, spec in enumerate(graph.layers):
        weights.append(got[2 * i].to_dense().reshape(spec.in_dim, spec.out_dim))
        biases.append(got[2 * i + 1].to_dense().reshape(spec.out_dim))
    return ModelParams(weights, biases), version


def _run(graph: LayerGraph, dataset: Dataset, *, steps, lr, batch_size,
         seed=0, init_seed=None, initial_params=None, precision=64,
         dp=None, mp=None,
         transport="inproc", streams=1, shared_error_buffer=True,
         drain_interval=0, drain_mode="deterministic",
         staleness_bound=None, staleness_policy="clamp",
         eval_every=0, cost_model=None, audit=True):
    if precision not in (64, 32):
        raise ValueError("precision must be 64 or 32")
    dtype = np.float64 if precision == 64 else np.float32
    wire_mode = precision == 32
    if staleness_policy not in ("fail", "clamp"):
        raise ValueError("staleness_policy must be fail or clamp")
    if drain_mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown drain mode {drain_mode!r}")
    mp = dict(mp) if mp else {}
    for pos in mp:
        if pos not in graph.splits:
            raise ShapeError(f"mp hook at {pos}, declared splits are {graph.splits}")

    build_topology(graph)  # validates the partitioning
    data = dataset.astype(dtype)
    if initial_params is not None:
        # warm start: resume or fine-tune from a previous run's final_params
        got = [t.shape for _, t in initial_params.named_tensors()]
        want = [t.shape for _, t in init_params(graph, 0, dtype).named_tensors()]
        if got != want:
            raise ShapeError(f"initial_params shapes {got} do not match graph {want}")
        params0 = initial_params.astype(dtype)
    else:
        params0 = init_params(graph, seed if init_seed is None else init_seed, dtype)
    server = ParameterServer(params0.copy(), lr, audit=audit)
    meter = ChannelMeter()
    names = [name for name, _ in params0.named_tensors()]
    shapes = [t.shape for _, t in params0.named_tensors()]

    shared_ebufs = None
    if dp is not None and shared_error_buffer:
        shared_ebufs = {n: ErrorBuffer.zeros(s, dtype=dtype)
                        for n, s in zip(names, shapes)}

    per_stream = []
    for s in range(streams):
        links = {
            "pull": make_link(f"server>trainer{s}", meter, transport, wire_mode),
            "push": make_link(f"trainer{s}>server", meter, transport, wire_mode),
        }
        hooks = {}
        for pos, factory in mp.items():
            inner = _hook_for(factory, graph.split_width(pos), dtype)
            fwd = make_link(f"trainer{s}/split{pos}.fwd", meter, transport, wire_mode)
            bwd = make_link(f"trainer{s}/split{pos}.bwd", meter, transport, wire_mode)
            hooks[pos] = WiredSplit(inner, pos, fwd, bwd)
        comps = None
        if dp is not None:
            comps = {
                n: DpCompressor(shape, dp, dtype,
                                ebuf=shared_ebufs[n] if shared_ebufs else None)
                for n, shape in zip(names, shapes)
            }
        batches = BatchStream(data.train_x, data.train_y, batch_size,
                              seed=seed * 1000 + s + 1)
        rng = np.random.Generator(np.random.PCG64(seed * 1000 + 7919 + s))
        per_stream.append({"links": links, "hooks": hooks, "comps": comps,
                           "batches": batches, "rng": rng, "rows": [],
                           "staleness": [], "clamped": 0})

    def batch_accuracy(st, batch):
        if graph.loss == "bce":
            return float(np.mean((st.final > 0) == (batch.labels > 0.5)))
        return float("nan")

    def stream_step(sid, t):
        ctx = per_stream[sid]
        links, hooks, comps = ctx["links"], ctx["hooks"], ctx["comps"]
        params, v_pull = _pull_params(server, graph, links["pull"], dtype)
        batch = next(ctx["batches"])
        for h in hooks.values():
            h.iteration = t
        loss, st = forward(params, graph, batch, hooks)
        grads, _ = backward(params, graph, batch, st, hooks)

        lag = server.version - v_pull
        ctx["staleness"].append(lag)
        if staleness_bound is not None and lag > staleness_bound:
            if staleness_policy == "fail":
                raise StalenessError(
                    f"pulled model lagged {lag} iterations, bound {staleness_bound}"
                )
            ctx["clamped"] += 1

        updates = []
        for tid, (name, g) in enumerate(grads.named_tensors()):
            upd = comps[name].compress(g) if comps else SparseUpdate.dense(g)
            links["push"].send(WireMessage("param-grad", t, tid, upd))
        for _ in names:
            msg = links["push"].recv()
            updates.append((msg.tensor_id, msg.update))
        version = server.apply_batch(updates)

        if comps and drain_interval:
            if drain_mode == "deterministic":
                due = version % drain_interval == 0
            else:
                due = ctx["rng"].random() < 1.0 / drain_interval
            if due:
                for comp in comps.values():
                    comp.ebuf.drain()

        row = {"stream": sid, "iteration": t, "loss": loss,
               "accuracy": batch_accuracy(st, batch), "staleness": lag,
               "sent_bytes": meter.total("sent_header") + meter.total("sent_payload")}
        for link in links.values():
            row[f"bytes:{link.name}"] = (meter.total("sent_header", link=link.name)
                                         + meter.total("sent_payload", link=link.name))
        if comps:
            row["ef_norm"] = max(
                float(np.abs(c.ebuf.residual).max()) for c in comps.values())
            for name, comp in comps.items():
                row[f"tau:{name}"] = comp.state.tau
        for pos, h in hooks.items():
            inner = h.inner
            for link in (h.fwd, h.bwd):
                row[f"bytes:{link.name}"] = (meter.total("sent_header", link=link.name)
                                             + meter.total("sent_payload", link=link.name))
            if getattr(inner, "density_trace", None):
                row[f"density:split{pos}"] = inner.density_trace[-1]
            if getattr(inner, "trace", None):
                row[f"tau:split{pos}"] = inner.trace[-1]
        if eval_every and t % eval_every == 0:
            snap, _ = server.pull()
            tl, ta = evaluate(snap, graph, data.test_x, data.test_y,
                              taps=_eval_taps(hooks))
            row["test_loss"], row["test_acc"] = tl, ta
        ctx["rows"].append(row)

    def stream_loop(sid):
        for t in range(1, steps + 1):
            try:
                stream_step(sid, t)
            except DctsimError as exc:
                exc.args = (f"stream {sid} iteration {t}: {exc.args[0]}",
                            *exc.args[1:]) if exc.args else (
                    f"stream {sid} iteration {t}",)
                raise

    if streams == 1:
        stream_loop(0)
    else:
        errors = []

        def guarded(sid):
            try:
                stream_loop(sid)
            except BaseException as exc:  # noqa: BLE001 - propagated below
                errors.append(exc)

        threads = [threading.Thread(target=guarded, args=(s,), daemon=True)
                   for s in range(streams)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]

    for ctx in per_stream:
        for link in ctx["links"].values():
            link.close()
        for h in ctx["hooks"].values():
            h.fwd.close()
            h.bwd.close()

    rows = [row for ctx in per_stream for row in ctx["rows"]]
    rows.sort(key=lambda r: (r["iteration"], r["stream"]))
    staleness = [s for ctx in per_stream for s in ctx["staleness"]]
    clamped = sum(ctx["clamped"] for ctx in per_stream)

    sorted_elements = 0
    compress_seconds = 0.0
    for ctx in per_stream:
        if ctx["comps"]:
            sorted_elements += sum(c.sorted_elements for c in ctx["comps"].values())
            compress_seconds += sum(c.compress_seconds for c in ctx["comps"].values())
        for h in ctx["hooks"].values():
            sorted_elements += getattr(h.inner, "sorted_elements", 0)

    cm = cost_model if cost_model is not None else CostModel()
    sim_time = cm.simulated_time(meter, sorted_elements)

    final = server.params.copy()
    test_loss, test_acc = evaluate(final, graph, data.test_x, data.test_y,
                                   taps=_eval_taps(per_stream[0]["hooks"]))
    train_loss, train_acc = evaluate(final, graph, data.train_x, data.train_y,
                                     taps=_eval_taps(per_stream[0]["hooks"]))
    sent_bytes = meter.total("sent_header") + meter.total("sent_payload")
    summary = {
        "steps": steps,
        "streams": streams,
        "precision": precision,
        "batch_size": batch_size,
        "seed": seed,
        "final_train_loss": train_loss,
        "final_train_accuracy": train_acc,
        "final_test_loss": test_loss,
        "final_test_accuracy": test_acc,
        "sent_bytes": sent_bytes,
        "sorted_elements": sorted_elements,
        "compress_seconds": compress_seconds,
        "simulated_time": sim_time,
        "shared_error_buffer": bool(shared_ebufs),
        "drain_interval": drain_interval,
        "drain_mode": drain_mode if drain_interval else "off",
    }
    summary.update(_reduction_summary(
        graph, shapes, names, dp, per_stream[0]["hooks"], per_stream[0]["comps"],
        batch_size, steps, streams, sent_bytes))
    summary["staleness_max"] = max(staleness) if staleness else 0
    summary["staleness_mean"] = float(np.mean(staleness)) if staleness else 0.0
    summary["staleness_clamped"] = clamped
    stream0 = per_stream[0]
    return RunResult(
        rows=rows, final_params=final, meter=meter, server=server,
        hooks={pos: h.inner for pos, h in stream0["hooks"].items()},
        compressors=stream0["comps"] or {},
        staleness=staleness, clamped=clamped,
        sorted_elements=sorted_elements, compress_seconds=compress_seconds,
        simulated_time=sim_time, summary=summary,
    )


def run_sync(graph, dataset, **kw) -> RunResult:
    """Single-stream deterministic training; see _run for the knobs."""
    kw.pop("streams", None)
    return _run(graph, dataset, streams=1, **kw)


def run_async(graph, dataset, *, streams, **kw) -> RunResult:
    """Concurrent update streams against one server; streams=1 equals run_sync."""
    if streams < 1:
        raise ValueError("streams must be >= 1")
    return _run(graph, dataset, streams=streams, **kw)


# ------------------------------------------------------------- theorem probe

@dataclass
class ProbeReport:
    tau_bar: float
    taus: np.ndarray
    assumption_residual: float
    discrepancy: float
    grad_norm_dynamic: float
    grad_norm_fixed: float


def _grad_vector(grads: ModelParams):
    return np.concatenate([t.ravel() for _, t in grads.named_tensors()])


def theorem_probe(params: ModelParams, graph: LayerGraph, x, y,
                  eta: float, max_samples: int = 4096) -> ProbeReport:
    """Compare per-sample dynamic-threshold gradients with the frozen-mean one.

    For a single-split network: compute each sample's split threshold tau_i
    and their mean tau_bar, then the exact mean gradient of the per-sample
    dynamically masked network (lhs) and the gradient of the network masked
    with the single threshold tau_bar everywhere (rhs).  Reports the gap
    between the two mask means (the modeling assumption) and the gradient
    discrepancy |lhs - rhs|.
    """
    if len(graph.splits) != 1:
        raise ShapeError(f"probe needs exactly one split, graph has {graph.splits}")
    x = np.asarray(x)
    y = np.atleast_2d(np.asarray(y))
    if x.shape[0] > max_samples:
        raise ShapeError(f"{x.shape[0]} samples exceed the enumeration cap {max_samples}")
    split = graph.splits[0]

    batch = Batch(x, y)
    _, st = forward(params, graph, batch)  # hookless: raw split activations
    acts = st.inputs[split]
    taus = row_thresholds(acts, eta)
    tau_bar = float(taus.mean())

    dyn = np.where(np.abs(acts) >= taus[:, None], acts, 0.0).mean(axis=0)
    fix = np.where(np.abs(acts) >= tau_bar, acts, 0.0).mean(axis=0)
    residual = float(np.abs(dyn - fix).max())

    def masked_grads(hook):
        taps = {split: hook}
        b = Batch(x, y)
        _, fstate = forward(params, graph, b, taps)
        grads, _ = backward(params, graph, b, fstate, taps)
        return _grad_vector(grads)

    lhs = masked_grads(TopKMaskHook(eta, record_trace=False))
    rhs = masked_grads(FixedThresholdHook(tau_bar))
    return ProbeReport(
        tau_bar=tau_bar,
        taus=taus,
        assumption_residual=residual,
        discrepancy=float(np.linalg.norm(lhs - rhs)),
        grad_norm_dynamic=float(np.linalg.norm(lhs)),
        grad_norm_fixed=float(np.linalg.norm(rhs)),
    )
