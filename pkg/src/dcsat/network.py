"""Dense feedforward generator with hand-written forward/backward passes.

A layer computes ``a = act(W h + b)``. For an H-layer net the input Jacobian
is the chain ``D_H W_H ... D_1 W_1`` where ``D_l`` is the diagonal of
activation derivatives at layer ``l``'s pre-activation; ``jacobian_at``
builds exactly that product.

Checkpoint format (UTF-8 text, one token stream, floats in shortest
round-trip decimal)::

    dcsat-net 1
    seed <int>
    layers <H>
    dims <k> <d_1> ... <n>
    activations <name_1> ... <name_H>
    W <l> <rows> <cols>
    <row-major values, one row per line>
    b <l> <len>
    <values>
    ...
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "Activation",
    "DenseLayer",
    "GeneratorNet",
    "ForwardTrace",
    "init_generator",
    "forward",
    "jacobian_at",
    "jacobian_batch",
    "finite_diff_jacobian",
    "param_gradients",
    "save_net",
    "load_net",
    "net_to_text",
    "net_from_text",
]

_ACT_RE = re.compile(r"^(identity|sigmoid|tanh|relu|leaky_relu)(?:\(([^)]*)\))?$")


@dataclass(frozen=True)
class Activation:
    kind: str
    alpha: float = 0.01

    @classmethod
    def parse(cls, spec) -> "Activation":
        if isinstance(spec, Activation):
            return spec
        match = _ACT_RE.match(str(spec).strip())
        if match is None:
            raise ValueError(f"unknown activation {spec!r}")
        kind, arg = match.groups()
        if arg is not None and kind != "leaky_relu":
            raise ValueError(f"activation {kind} takes no parameter")
        return cls(kind, float(arg) if arg else 0.01)

    @property
    def name(self) -> str:
        if self.kind == "leaky_relu":
            return f"leaky_relu({self.alpha!r})"
        return self.kind

    def __call__(self, a):
        if self.kind == "identity":
            return a.copy()
        if self.kind == "sigmoid":
            return expit(a)
        if self.kind == "tanh":
            return np.tanh(a)
        if self.kind == "relu":
            return np.maximum(a, 0.0)
        return np.where(a > 0, a, self.alpha * a)

    def derivative(self, a, out=None):
        """Derivative at pre-activation ``a``; ``out`` (the activation value) saves work."""
        if self.kind == "identity":
            return np.ones_like(a)
        if self.kind == "sigmoid":
            s = expit(a) if out is None else out
            return s * (1.0 - s)
        if self.kind == "tanh":
            t = np.tanh(a) if out is None else out
            return 1.0 - t * t
        # kink at 0 gets derivative 0 (relu) / alpha (leaky)
        if self.kind == "relu":
            return (a > 0).astype(float)
        return np.where(a > 0, 1.0, self.alpha)


@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        self.w = np.array(self.w, dtype=float)
        self.b = np.array(self.b, dtype=float)
        if self.w.ndim != 2 or min(self.w.shape) < 1:
            raise ValueError(f"weight must be a nonempty matrix, got shape {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ValueError(f"bias shape {self.b.shape} does not match {self.w.shape[0]} outputs")
        self.activation = Activation.parse(self.activation).name

    @property
    def act(self) -> Activation:
        return Activation.parse(self.activation)

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]


@dataclass
class GeneratorNet:
    layers: list
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a net needs at least one layer")
        for l in range(1, len(self.layers)):
            if self.layers[l].in_dim != self.layers[l - 1].out_dim:
                raise ValueError(
                    f"layer {l} expects {self.layers[l].in_dim} inputs "
                    f"but layer {l - 1} produces {self.layers[l - 1].out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list:
        return [layer.activation for layer in self.layers]

    def copy(self) -> "GeneratorNet":
        return copy.deepcopy(self)

    def __call__(self, z) -> np.ndarray:
        return forward(self, z).output

    def split(self, at: int):
        """Two nets made of layers ``[:at]`` and ``[at:]`` (copies)."""
        return (
            GeneratorNet([copy.deepcopy(l) for l in self.layers[:at]], self.seed),
            GeneratorNet([copy.deepcopy(l) for l in self.layers[at:]], self.seed),
        )


@dataclass
class ForwardTrace:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def init_generator(dims, activations, seed: int = 0) -> GeneratorNet:
    """Glorot-uniform weights, zero biases.

    ``activations`` is one name per layer or a single name for all layers.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"bad layer dimensions {dims}")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        activations = [activations] * n_layers
    if len(activations) != n_layers:
        raise ValueError(f"need {n_layers} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return GeneratorNet(layers, seed=seed)


def _check_input(net: GeneratorNet, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim not in (1, 2) or z.shape[-1] != net.input_dim:
        raise ValueError(f"expected input of length {net.input_dim}, got shape {z.shape}")
    return z


def forward(net: GeneratorNet, z, rows=None) -> ForwardTrace:
    """Run the net on ``z`` (shape (k,) or (N, k)), caching every layer.

    ``rows`` restricts the last layer to a subset of output units (used to
    evaluate only the sensed pixels); traces built that way cannot be fed to
    ``param_gradients``.
    """
    h = _check_input(net, z)
    trace = ForwardTrace()
    last = len(net.layers) - 1
    for l, layer in enumerate(net.layers):
        w, b = layer.w, layer.b
        if l == last and rows is not None:
            w, b = w[rows], b[rows]
        trace.inputs.append(h)
        a = h @ w.T + b
        h = layer.act(a)
        trace.pre.append(a)
        trace.post.append(h)
    return trace


def jacobian_batch(net: GeneratorNet, z, rows=None) -> np.ndarray:
    """Input Jacobians for a batch ``z`` of shape (N, k): returns (N, n_out, k)."""
    z = _check_input(net, z)
    if z.ndim == 1:
        z = z[None, :]
    trace = forward(net, z, rows=rows)
    last = len(net.layers) - 1
    jac = None
    for l, layer in enumerate(net.layers):
        w = layer.w if (l != last or rows is None) else layer.w[rows]
        d = layer.act.derivative(trace.pre[l], trace.post[l])
        if jac is None:
            jac = d[:, :, None] * w[None, :, :]
        else:
            jac = d[:, :, None] * np.matmul(w, jac)
    return jac


def jacobian_at(net: GeneratorNet, z, rows=None) -> np.ndarray:
    """Input Jacobian ``dG/dz`` at a single latent point, shape (n, k)."""
    z = _check_input(net, z)
    if z.ndim != 1:
        raise ValueError("jacobian_at takes a single latent vector")
    return jacobian_batch(net, z[None, :], rows=rows)[0]


def finite_diff_jacobian(net: GeneratorNet, z, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, column by column."""
    if h <= 0:
        raise ValueError("step h must be positive")
    z = _check_input(net, z)
    k = z.shape[0]
    cols = []
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        cols.append((net(z + e) - net(z - e)) / (2.0 * h))
    return np.stack(cols, axis=1)


def param_gradients(net: GeneratorNet, trace: ForwardTrace, upstream) -> list:
    """Gradients of ``<upstream, G(z)>`` with respect to every ``(W, b)``.

    For a batched trace ``upstream`` has shape (N, n) and the gradients are
    summed over the batch.

    Returns:
        list of ``(dW, db)`` tuples, one per layer.
    """
    upstream = np.asarray(upstream, dtype=float)
    if len(trace.pre) != len(net.layers):
        raise ValueError("trace does not belong to this net")
    if upstream.shape != trace.output.shape or trace.output.shape[-1] != net.output_dim:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match trace output {trace.output.shape}"
        )
    batched = upstream.ndim == 2
    grads = [None] * len(net.layers)
    delta = upstream
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        delta = delta * layer.act.derivative(trace.pre[l], trace.post[l])
        h = trace.inputs[l]
        if batched:
            grads[l] = (delta.T @ h, delta.sum(axis=0))
        else:
            grads[l] = (np.outer(delta, h), delta.copy())
        if l:
            delta = delta @ layer.w
    return grads


def net_to_text(net: GeneratorNet) -> str:
    out = [
        "dcsat-net 1",
        f"seed {int(net.seed)}",
        f"layers {len(net.layers)}",
        "dims " + " ".join(str(d) for d in net.dims),
        "activations " + " ".join(net.activations),
    ]
    for l, layer in enumerate(net.layers):
        rows, cols = layer.w.shape
        out.append(f"W {l} {rows} {cols}")
        out.extend(" ".join(repr(float(v)) for v in row) for row in layer.w)
        out.append(f"b {l} {rows}")
        out.append(" ".join(repr(float(v)) for v in layer.b))
    return "\n".join(out) + "\n"


def net_from_text(text: str) -> GeneratorNet:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "dcsat-net 1":
        raise ValueError("not a dcsat-net v1 checkpoint")

    def field_(i, key):
        parts = lines[i].split()
        if not parts or parts[0] != key:
            raise ValueError(f"line {i + 1}: expected '{key}'")
        return parts[1:]

    seed = int(field_(1, "seed")[0])
    n_layers = int(field_(2, "layers")[0])
    dims = [int(t) for t in field_(3, "dims")]
    acts = field_(4, "activations")
    if len(dims) != n_layers + 1 or len(acts) != n_layers:
        raise ValueError("header dimensions are inconsistent")
    pos = 5
    layers = []
    for l in range(n_layers):
        _, rows, cols = field_(pos, "W")
        rows, cols = int(rows), int(cols)
        if (rows, cols) != (dims[l + 1], dims[l]):
            raise ValueError(f"layer {l}: W is {rows}x{cols}, header says {dims[l + 1]}x{dims[l]}")
        w = np.array([[float(t) for t in lines[pos + 1 + r].split()] for r in range(rows)])
        pos += 1 + rows
        field_(pos, "b")
        b = np.array([float(t) for t in lines[pos + 1].split()])
        pos += 2
        layers.append(DenseLayer(w, b, acts[l]))
    return GeneratorNet(layers, seed=seed)


def save_net(net: GeneratorNet, path) -> None:
    Path(path).write_text(net_to_text(net))


def load_net(path) -> GeneratorNet:
    return net_from_text(Path(path).read_text())
