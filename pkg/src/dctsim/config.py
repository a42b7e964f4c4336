"""Experiment configuration: one YAML file drives a full run.

The schema is nested key/value:

    model:      dims, hidden, final, loss, splits
    dataset:    kind, dims, samples, seed, test_fraction, test_rows,
                separation, spread, noise, active, targets, path
    optimizer:  lr, batch_size
    run:        steps, seed, precision, mode, transport, eval_every
    dp:         eta, lifespan                        (omit for no DP codec)
    mp:         list of {split, codec, ...}          (omit for no MP codec)
    async:      streams, shared_error_buffer, drain_interval, drain_mode,
                staleness_bound, staleness_policy
    cost_model: latency, bandwidth, sort_cost
    sweep:      field, values                        (optional run matrix)
    output:     dir

Everything has a default except model.dims; a config round-trips through
dumps()/loads() to an identical object, and (config, seed) pins a run.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .codecs import (
    CodecConfig,
    SketchConfig,
    SketchHook,
    TopKMaskHook,
    XGradTopKHook,
)
from .data import DatasetSpec
from .errors import ConfigError
from .nn import LayerGraph
from .wire import CostModel

MP_CODECS = ("topk-mask", "sketch", "xgrad-topk")
SWEEP_FIELDS = ("dp.lifespan", "dp.eta", "mp.eta")


def _require(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _pick(section, where, **typed_defaults):
    """Pull typed keys out of a mapping, rejecting unknown ones."""
    if section is None:
        section = {}
    _require(isinstance(section, dict), where, f"expected a mapping, got {section!r}")
    unknown = set(section) - set(typed_defaults)
    _require(not unknown, where, f"unknown keys {sorted(unknown)}")
    out = {}
    for key, (typ, default) in typed_defaults.items():
        raw = section.get(key, default)
        if raw is None:
            out[key] = None
            continue
        bad = ConfigError(f"{where}.{key}: expected {typ.__name__}, got {raw!r}")
        if typ in (int, float) and isinstance(raw, bool):
            raise bad
        if typ is float:
            if isinstance(raw, (int, float)):
                out[key] = float(raw)
            elif raw in ("inf", ".inf"):
                out[key] = math.inf
            else:
                raise bad
            continue
        if not isinstance(raw, typ):
            raise bad
        out[key] = raw
    return out


@dataclass(frozen=True)
class MpEntry:
    split: int
    codec: str = "topk-mask"
    eta: float = 0.95
    compression: float = 0.75
    width: int = 0
    sketch_seed: int = 0

    def __post_init__(self):
        if self.codec not in MP_CODECS:
            raise ConfigError(f"mp[split={self.split}].codec: "
                              f"{self.codec!r} not in {MP_CODECS}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"mp[split={self.split}].eta: {self.eta} outside [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    model_dims: tuple
    hidden: str = "relu"
    final: str = None
    loss: str = "mse"
    splits: tuple = ()
    dataset: DatasetSpec = None
    lr: float = 0.1
    batch_size: int = 32
    steps: int = 100
    seed: int = 0
    precision: int = 64
    mode: str = "sync"
    transport: str = "inproc"
    eval_every: int = 0
    dp: CodecConfig = None
    mp: tuple = ()
    streams: int = 1
    shared_error_buffer: bool = True
    drain_interval: int = 0
    drain_mode: str = "deterministic"
    staleness_bound: int = None
    staleness_policy: str = "clamp"
    cost_model: CostModel = field(default_factory=CostModel)
    sweep_field: str = None
    sweep_values: tuple = ()
    out_dir: str = "runs/out"

    def __post_init__(self):
        _require(self.precision in (64, 32), "run.precision",
                 f"{self.precision} is not 64 or 32")
        _require(self.mode in ("sync", "async"), "run.mode",
                 f"{self.mode!r} is not sync or async")
        _require(self.transport in ("inproc", "socket"), "run.transport",
                 f"{self.transport!r} is not inproc or socket")
        _require(self.transport != "socket" or self.precision == 32,
                 "run.transport", "socket transport requires precision 32")
        _require(self.steps >= 1, "run.steps", "must be >= 1")
        _require(self.lr > 0, "optimizer.lr", "must be positive")
        _require(self.batch_size >= 1, "optimizer.batch_size", "must be >= 1")
        _require(self.streams >= 1, "async.streams", "must be >= 1")
        _require(self.mode == "async" or self.streams == 1, "async.streams",
                 "streams > 1 requires run.mode async")
        _require(self.drain_interval >= 0, "async.drain_interval", "must be >= 0")
        _require(self.drain_mode in ("deterministic", "stochastic"),
                 "async.drain_mode", f"{self.drain_mode!r} unknown")
        _require(self.staleness_bound is None or self.staleness_bound >= 0,
                 "async.staleness_bound", "must be >= 0")
        _require(self.staleness_policy in ("fail", "clamp"),
                 "async.staleness_policy", f"{self.staleness_policy!r} unknown")
        graph = self.graph()  # dim-chain, split, and loss validity
        for entry in self.mp:
            _require(entry.split in graph.splits, f"mp[split={entry.split}]",
                     f"split not declared in model.splits {list(self.splits)}")
        _require(len({e.split for e in self.mp}) == len(self.mp), "mp",
                 "duplicate split entries")
        if self.dataset is not None:
            _require(self.dataset.kind == "csv"
                     or self.dataset.dims == self.model_dims[0], "dataset.dims",
                     f"{self.dataset.dims} != model input dim {self.model_dims[0]}")
        if self.sweep_field is not None:
            _require(self.sweep_field in SWEEP_FIELDS, "sweep.field",
                     f"{self.sweep_field!r} not in {SWEEP_FIELDS}")
            _require(len(self.sweep_values) >= 1, "sweep.values", "must be non-empty")
            if self.sweep_field.startswith("dp."):
                _require(self.dp is not None, "sweep.field",
                         "dp sweep needs a dp section")
            else:
                _require(len(self.mp) > 0, "sweep.field",
                         "mp sweep needs an mp section")

    # -------------------------------------------------------------- builders

    def graph(self) -> LayerGraph:
        try:
            return LayerGraph.mlp(list(self.model_dims), hidden=self.hidden,
                                  final=self.final, loss=self.loss,
                                  splits=tuple(self.splits))
        except Exception as exc:
            raise ConfigError(f"model: {exc}") from exc

    def mp_hooks(self) -> dict:
        hooks = {}
        for entry in self.mp:
            hooks[entry.split] = _mp_factory(entry, self.batch_size)
        return hooks

    def run_kwargs(self) -> dict:
        """Keyword arguments for runtime.run_sync / run_async."""
        kw = dict(steps=self.steps, lr=self.lr, batch_size=self.batch_size,
                  seed=self.seed, precision=self.precision,
                  transport=self.transport, eval_every=self.eval_every,
                  dp=self.dp, mp=self.mp_hooks(), cost_model=self.cost_model,
                  shared_error_buffer=self.shared_error_buffer,
                  drain_interval=self.drain_interval, drain_mode=self.drain_mode,
                  staleness_bound=self.staleness_bound,
                  staleness_policy=self.staleness_policy)
        if self.mode == "async":
            kw["streams"] = self.streams
        return kw

    def with_overrides(self, seed=None, out_dir=None, mode=None, precision=None):
        changes = {}
        if seed is not None:
            changes["seed"] = seed
            if self.dataset is not None:
                changes["dataset"] = dataclasses.replace(self.dataset, seed=seed)
        if out_dir is not None:
            changes["out_dir"] = out_dir
        if mode is not None:
            changes["mode"] = mode
        if precision is not None:
            changes["precision"] = precision
        return dataclasses.replace(self, **changes) if changes else self

    def with_sweep_value(self, value):
        if self.sweep_field == "dp.lifespan":
            dp = CodecConfig(self.dp.eta, lifespan=int(value))
            return dataclasses.replace(self, dp=dp, sweep_field=None,
                                       sweep_values=())
        if self.sweep_field == "dp.eta":
            dp = CodecConfig(float(value), lifespan=self.dp.lifespan)
            return dataclasses.replace(self, dp=dp, sweep_field=None,
                                       sweep_values=())
        if self.sweep_field == "mp.eta":
            mp = tuple(dataclasses.replace(e, eta=float(value)) for e in self.mp)
            return dataclasses.replace(self, mp=mp, sweep_field=None,
                                       sweep_values=())
        raise ConfigError(f"sweep.field: {self.sweep_field!r} unknown")

    # ----------------------------------------------------------- round trip

    def to_dict(self) -> dict:
        out = {
            "model": {"dims": list(self.model_dims), "hidden": self.hidden,
                      "final": self.final, "loss": self.loss,
                      "splits": list(self.splits)},
            "optimizer": {"lr": self.lr, "batch_size": self.batch_size},
            "run": {"steps": self.steps, "seed": self.seed,
                    "precision": self.precision, "mode": self.mode,
                    "transport": self.transport, "eval_every": self.eval_every},
            "output": {"dir": self.out_dir},
        }
        if self.dataset is not None:
            d = self.dataset
            out["dataset"] = {"kind": d.kind, "dims": d.dims, "samples": d.samples,
                              "seed": d.seed, "test_fraction": d.test_fraction,
                              "test_rows": d.test_rows,
                              "separation": d.separation, "spread": d.spread,
                              "noise": d.noise, "active": d.active,
                              "targets": d.targets, "path": d.path}
        if self.dp is not None:
            out["dp"] = {"eta": self.dp.eta, "lifespan": self.dp.lifespan}
        if self.mp:
            out["mp"] = [{"split": e.split, "codec": e.codec, "eta": e.eta,
                          "compression": e.compression, "width": e.width,
                          "sketch_seed": e.sketch_seed} for e in self.mp]
        out["async"] = {"streams": self.streams,
                        "shared_error_buffer": self.shared_error_buffer,
                        "drain_interval": self.drain_interval,
                        "drain_mode": self.drain_mode,
                        "staleness_bound": self.staleness_bound,
                        "staleness_policy": self.staleness_policy}
        cm = self.cost_model
        out["cost_model"] = {"latency": cm.latency,
                             "bandwidth": "inf" if math.isinf(cm.bandwidth)
                             else cm.bandwidth,
                             "sort_cost": cm.sort_cost}
        if self.sweep_field is not None:
            out["sweep"] = {"field": self.sweep_field,
                            "values": list(self.sweep_values)}
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _mp_factory(entry: MpEntry, batch_size: int):
    if entry.codec == "topk-mask":
        return lambda w, dt: TopKMaskHook(entry.eta)
    if entry.codec == "sketch":
        cfg = SketchConfig(entry.compression, width=entry.width,
                           seed=entry.sketch_seed)
        return lambda w, dt: SketchHook(w, cfg, dt)
    return lambda w, dt: XGradTopKHook(entry.eta, (batch_size, w), dt)


def from_dict(doc: dict) -> ExperimentConfig:
    _require(isinstance(doc, dict), "config", f"expected a mapping, got {doc!r}")
    known = {"model", "dataset", "optimizer", "run", "dp", "mp", "async",
             "cost_model", "sweep", "output"}
    unknown = set(doc) - known
    _require(not unknown, "config", f"unknown sections {sorted(unknown)}")

    model = _pick(doc.get("model"), "model", dims=(list, None), hidden=(str, "relu"),
                  final=(str, None), loss=(str, "mse"), splits=(list, []))
    _require(model["dims"] is not None, "model.dims", "required")
    _require(all(isinstance(d, int) and d >= 1 for d in model["dims"]),
             "model.dims", f"{model['dims']} must be positive integers")
    _require(all(isinstance(s, int) for s in model["splits"]),
             "model.splits", "must be integers")

    optim = _pick(doc.get("optimizer"), "optimizer",
                  lr=(float, 0.1), batch_size=(int, 32))
    run = _pick(doc.get("run"), "run", steps=(int, 100), seed=(int, 0),
                precision=(int, 64), mode=(str, "sync"),
                transport=(str, "inproc"), eval_every=(int, 0))

    dataset = None
    if "dataset" in doc:
        ds = _pick(doc["dataset"], "dataset", kind=(str, None), dims=(int, 0),
                   samples=(int, 0), seed=(int, 0), test_fraction=(float, 0.2),
                   test_rows=(int, 0), separation=(float, 3.0),
                   spread=(float, 1.0), noise=(float, 0.1), active=(float, 0.3),
                   targets=(int, 1), path=(str, ""))
        _require(ds["kind"] is not None, "dataset.kind", "required")
        try:
            dataset = DatasetSpec(**ds)
        except ConfigError as exc:
            raise ConfigError(f"dataset: {exc}") from exc

    dp = None
    if "dp" in doc:
        dpd = _pick(doc["dp"], "dp", eta=(float, 0.95), lifespan=(int, 1))
        try:
            dp = CodecConfig(dpd["eta"], lifespan=dpd["lifespan"])
        except Exception as exc:
            raise ConfigError(f"dp: {exc}") from exc

    mp = []
    if "mp" in doc:
        raw_mp = doc["mp"]
        _require(isinstance(raw_mp, list), "mp", "expected a list of split entries")
        for i, raw in enumerate(raw_mp):
            e = _pick(raw, f"mp[{i}]", split=(int, None), codec=(str, "topk-mask"),
                      eta=(float, 0.95), compression=(float, 0.75),
                      width=(int, 0), sketch_seed=(int, 0))
            _require(e["split"] is not None, f"mp[{i}].split", "required")
            mp.append(MpEntry(**e))

    asy = _pick(doc.get("async"), "async", streams=(int, 1),
                shared_error_buffer=(bool, True), drain_interval=(int, 0),
                drain_mode=(str, "deterministic"), staleness_bound=(int, None),
                staleness_policy=(str, "clamp"))
    cmd = _pick(doc.get("cost_model"), "cost_model", latency=(float, 0.0),
                bandwidth=(float, math.inf), sort_cost=(float, 0.0))
    sweep = _pick(doc.get("sweep"), "sweep", field=(str, None), values=(list, []))
    out = _pick(doc.get("output"), "output", dir=(str, "runs/out"))

    return ExperimentConfig(
        model_dims=tuple(model["dims"]), hidden=model["hidden"],
        final=model["final"], loss=model["loss"], splits=tuple(model["splits"]),
        dataset=dataset, lr=optim["lr"], batch_size=optim["batch_size"],
        steps=run["steps"], seed=run["seed"], precision=run["precision"],
        mode=run["mode"], transport=run["transport"], eval_every=run["eval_every"],
        dp=dp, mp=tuple(mp), streams=asy["streams"],
        shared_error_buffer=asy["shared_error_buffer"],
        drain_interval=asy["drain_interval"], drain_mode=asy["drain_mode"],
        staleness_bound=asy["staleness_bound"],
        staleness_policy=asy["staleness_policy"],
        cost_model=CostModel(cmd["latency"], cmd["bandwidth"], cmd["sort_cost"]),
        sweep_field=sweep["field"], sweep_values=tuple(sweep["values"]),
        out_dir=out["dir"],
    )


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {exc}") from exc
    if doc is None:
        raise ConfigError(f"{source}: empty config")
    return from_dict(doc)


def load(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return loads(text, source=path)


def dlrm_shaped_default(**overrides) -> ExperimentConfig:
    """Desk-scale stand-in for the recommendation-model benchmark shape.

    13 sparse synthetic features feed an MLP with layer outputs
    256-256-64-16, then a 256-128-64-1 head.  Splits sit where the crossing
    width (256) is far above the signal dimension, so per-row masking has
    redundancy to work with: after layer 2 in the bottom stack and after
    the first head layer.
    """
    doc = {
        "model": {"dims": [13, 256, 256, 64, 16, 256, 128, 64, 1],
                  "hidden": "relu", "final": "sigmoid", "loss": "bce",
                  "splits": [2, 5]},
        "dataset": {"kind": "synthetic-ctr", "dims": 13,
                    "samples": 188416, "seed": 11, "test_rows": 8192,
                    "spread": 2.0, "noise": 0.8, "active": 0.3},
        "optimizer": {"lr": 0.02, "batch_size": 256},
        "run": {"steps": 5500, "seed": 7, "precision": 32},
    }
    doc.update(overrides)
    return from_dict(doc)
