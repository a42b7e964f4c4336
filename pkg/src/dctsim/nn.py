"""Dense feed-forward engine with explicit backward passes and split hooks.

Layers are fully connected with linear, relu, or sigmoid activations.  A
split point sits between two layers; whatever hook is registered there
transforms the activation on the way forward and the matching gradient on
the way backward.  Losses are batch means, so gradient scale does not
depend on the batch size.  Binary cross-entropy is fused with a final
sigmoid in log-sum-exp form and never evaluates the sigmoid inside the
loss, which keeps large magnitudes finite.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericOverflowError, ShapeError, StateMismatchError

ACTIVATIONS = ("linear", "relu", "sigmoid")
LOSSES = ("mse", "bce")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class LayerGraph:
    """Ordered layer stack plus declared split positions and the loss kind.

    A split at position p sits between layer p-1 and layer p, so valid
    positions are 1 .. len(layers)-1.
    """

    layers: tuple
    splits: tuple = ()
    loss: str = "mse"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "splits", tuple(int(s) for s in self.splits))
        for i in range(1, len(self.layers)):
            a, b = self.layers[i - 1], self.layers[i]
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer {i - 1} emits {a.out_dim} but layer {i} expects {b.in_dim}"
                )
        prev = 0
        for s in self.splits:
            if not 0 < s < len(self.layers):
                raise ShapeError(f"split {s} not interior to {len(self.layers)} layers")
            if s <= prev:
                raise ShapeError("split positions must be strictly increasing")
            prev = s
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "bce" and self.layers[-1].activation != "sigmoid":
            raise ValueError("bce loss requires a sigmoid final layer (fused)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def split_width(self, pos: int) -> int:
        return self.layers[pos - 1].out_dim

    @staticmethod
    def mlp(dims, hidden="relu", final=None, loss="mse", splits=()):
        """Build a stack from a dim chain [in, h1, ..., out]."""
        if len(dims) < 2:
            raise ShapeError("dim chain needs at least input and output")
        if final is None:
            final = "sigmoid" if loss == "bce" else "linear"
        layers = []
        for i in range(len(dims) - 1):
            act = final if i == len(dims) - 2 else hidden
            layers.append(LayerSpec(dims[i], dims[i + 1], act))
        return LayerGraph(tuple(layers), tuple(splits), loss)


@dataclass
class ModelParams:
    """Per-layer weight and bias tensors; ids follow layer order."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must pair up layer by layer")

    @property
    def ids(self):
        return tuple(f"fc{i}" for i in range(len(self.weights)))

    def named_tensors(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"fc{i}.w", w
            yield f"fc{i}.b", b

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams([w.astype(dtype) for w in self.weights],
                           [b.astype(dtype) for b in self.biases])

    def allclose(self, other, **kw) -> bool:
        return all(np.allclose(a, b, **kw) for (_, a), (_, b)
                   in zip(self.named_tensors(), other.named_tensors()))

    def equal_bits(self, other) -> bool:
        return all(np.array_equal(a, b) for (_, a), (_, b)
                   in zip(self.named_tensors(), other.named_tensors()))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs))
        self.labels = np.atleast_2d(np.asarray(self.labels))
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows vs {self.labels.shape[0]} label rows"
            )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def init_params(graph: LayerGraph, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Bounded uniform weights, [-a, a] with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for spec in graph.layers:
        a = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        w = rng.uniform(-a, a, size=(spec.in_dim, spec.out_dim))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(spec.out_dim, dtype=dtype))
    return ModelParams(weights, biases)


def _activate(z, kind):
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, z.dtype.type(0.0))
    # stable sigmoid, one exp per entry, argument always <= 0
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate_grad(z, a, kind):
    if kind == "linear":
        return None  # multiply by one, skipped
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return a * (1.0 - a)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass
class ForwardState:
    """Everything backward needs, tied to the exact forward call that made it."""

    graph: LayerGraph
    params: ModelParams
    batch: Batch
    inputs: list          # input actually consumed by each layer (post-hook)
    zs: list              # pre-activation per layer
    final: np.ndarray     # post-activation output (mse) or final z (fused bce)
    loss: float
    consumed: bool = False


def _check_hooks(graph: LayerGraph, taps):
    if not taps:
        return {}
    for pos in taps:
        if pos not in graph.splits:
            raise ShapeError(f"hook registered at {pos}, declared splits are {graph.splits}")
    return taps


def forward(params: ModelParams, graph: LayerGraph, batch: Batch, taps=None):
    """Run the network; returns (mean loss over the batch, ForwardState)."""
    taps = _check_hooks(graph, taps)
    x = batch.inputs
    if x.shape[1] != graph.input_dim:
        raise ShapeError(f"input width {x.shape[1]}, layer fc0 expects {graph.input_dim}")
    if batch.labels.shape[1] != graph.output_dim:
        raise ShapeError(
            f"label width {batch.labels.shape[1]}, network emits {graph.output_dim}"
        )
    if len(params.weights) != len(graph.layers):
        raise ShapeError("params do not match the layer graph")

    fused_bce = graph.loss == "bce"
    n_layers = len(graph.layers)
    inputs, zs = [], []
    a = x
    for i, spec in enumerate(graph.layers):
        if i in graph.splits and taps.get(i) is not None:
            a = taps[i].on_forward(a)
        w, b = params.weights[i], params.biases[i]
        if a.shape[1] != w.shape[0]:
            raise ShapeError(f"layer fc{i}: input width {a.shape[1]} vs weight rows {w.shape[0]}")
        inputs.append(a)
        z = a @ w + b
        zs.append(z)
        last = i == n_layers - 1
        if last and fused_bce:
            a = z  # sigma applied implicitly by the fused loss
        else:
            a = _activate(z, spec.activation)
        if not np.all(np.isfinite(a)):
            raise NumericOverflowError(f"non-finite activation at layer fc{i}")

    y = batch.labels
    if fused_bce:
        bad = (y != 0) & (y != 1)
        if bad.any():
            raise ValueError("bce labels must be 0 or 1")
        loss = float(np.sum(_softplus(a) - y * a) / batch.size)
    else:
        d = a - y
        loss = float(np.sum(d * d) / batch.size)
    state = ForwardState(graph, params, batch, inputs, zs, a, loss)
    return loss, state


def backward(params: ModelParams, graph: LayerGraph, batch: Batch,
             state: ForwardState, taps=None):
    """Gradients of the mean loss; returns (ModelParams of grads, input grads)."""
    taps = _check_hooks(graph, taps)
    if state.params is not params or state.graph is not graph or state.batch is not batch:
        raise StateMismatchError("forward state does not belong to these arguments")
    if state.consumed:
        raise StateMismatchError("forward state already consumed by a backward pass")
    state.consumed = True

    y = batch.labels
    inv_b = 1.0 / batch.size
    if graph.loss == "bce":
        dz = (_activate(state.final, "sigmoid") - y) * inv_b
    else:
        d_out = 2.0 * (state.final - y) * inv_b
        spec = graph.layers[-1]
        ag = _activate_grad(state.zs[-1], state.final, spec.activation)
        dz = d_out if ag is None else d_out * ag

    grad_w = [None] * len(graph.layers)
    grad_b = [None] * len(graph.layers)
    for i in range(len(graph.layers) - 1, -1, -1):
        a_in = state.inputs[i]
        grad_w[i] = a_in.T @ dz
        grad_b[i] = dz.sum(axis=0)
        da = dz @ params.weights[i].T
        if i in graph.splits and taps.get(i) is not None:
            da = taps[i].on_backward(da)
        if i > 0:
            spec = graph.layers[i - 1]
            if spec.activation == "linear":
                dz = da
            else:
                a_prev = _raw_activation(state, graph, taps, i - 1)
                dz = da * _activate_grad(state.zs[i - 1], a_prev, spec.activation)
    return ModelParams(grad_w, grad_b), da


def _raw_activation(state, graph, taps, i):
    """Post-activation output of interior layer i, before any split hook."""
    if (i + 1) in graph.splits and taps.get(i + 1) is not None:
        # inputs[i+1] went through a hook; rebuild the raw activation from z
        return _activate(state.zs[i], graph.layers[i].activation)
    return state.inputs[i + 1]


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """params - lr * grads, elementwise; returns fresh tensors."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(grads.weights) != len(params.weights):
        raise ShapeError("gradient structure does not match params")
    ws, bs = [], []
    for w, b, gw, gb in zip(params.weights, params.biases, grads.weights, grads.biases):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise ShapeError("gradient tensor shape does not match its parameter")
        ws.append(w - lr * gw)
        bs.append(b - lr * gb)
    return ModelParams(ws, bs)


def evaluate(params: ModelParams, graph: LayerGraph, inputs, labels, taps=None):
    """Loss and (for bce) 0/1 accuracy on a dataset; accuracy is nan for mse."""
    batch = Batch(inputs, labels)
    loss, state = forward(params, graph, batch, taps)
    if graph.loss == "bce":
        pred = state.final > 0  # sigma(z) > 0.5 iff z > 0
        acc = float(np.mean(pred == (batch.labels > 0.5)))
    else:
        acc = float("nan")
    return loss, acc
