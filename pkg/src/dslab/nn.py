"""Small dense feed-forward networks with hand-written backprop.

Everything here runs in float64. Networks are plain containers of numpy
arrays; optimizers mutate those arrays in place so that any object holding a
reference (e.g. a tape) can detect staleness through ``version``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NonFiniteError

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ContractViolation("a network needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ContractViolation(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ContractViolation(f"layer {i}: weight/bias shapes disagree")
            if i and layers[i - 1].out_dim != layer.in_dim:
                raise ContractViolation(
                    f"layer {i} expects {layer.in_dim} inputs but layer {i - 1} emits "
                    f"{layers[i - 1].out_dim}"
                )
        self.layers = [
            Layer(
                np.ascontiguousarray(l.weight, dtype=np.float64),
                np.ascontiguousarray(l.bias, dtype=np.float64),
                l.activation,
            )
            for l in layers
        ]
        if not all(np.isfinite(p).all() for p in self.params()):
            raise ContractViolation("network parameters must be finite")
        self.version = 0

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str] | str, rng: np.random.Generator):
        """He-style uniform fan-in initialisation, zero biases.

        ``sizes`` lists every width from input to output, so ``len(sizes) - 1``
        layers are created.
        """
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 1)
        if len(activations) != len(sizes) - 1:
            raise ContractViolation("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [l.out_dim for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "input_dim": self.input_dim,
            "layers": [
                {
                    "in_dim": l.in_dim,
                    "out_dim": l.out_dim,
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNet":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ContractViolation(f"unsupported network format {doc.get('format_version')!r}")
        layers = []
        for spec in doc["layers"]:
            w = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["out_dim"], spec["in_dim"])
            layers.append(Layer(w, np.asarray(spec["bias"], dtype=np.float64), spec["activation"]))
        net = cls(layers)
        if net.input_dim != doc["input_dim"]:
            raise ContractViolation("input_dim does not match the first layer")
        return net


@dataclass
class Tape:
    """Per-layer inputs and pre-activations recorded by :func:`forward`."""

    net_id: int
    version: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


@dataclass
class Gradient:
    """Parameter gradients, ordered like ``DenseNet.params()``."""

    arrays: list[np.ndarray]
    input_grad: np.ndarray | None = None

    def scaled_add(self, other: "Gradient", scale: float) -> "Gradient":
        if len(other.arrays) != len(self.arrays):
            raise ContractViolation("gradients belong to different networks")
        return Gradient([a + scale * b for a, b in zip(self.arrays, other.arrays)])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "Gradient":
        return cls([np.zeros_like(p) for p in params])


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ContractViolation(f"expected input of width {net.input_dim}, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ContractViolation("input must be finite")
    return x


def forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    """Evaluate ``net`` on one input vector or a batch of row vectors."""
    h = _check_input(net, x)
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, Tape(id(net), net.version, inputs, preacts)


def predict(net: DenseNet, x) -> np.ndarray:
    """Same values as ``forward(net, x)[0]`` without keeping a tape."""
    h = _check_input(net, x)
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h


def backward(net: DenseNet, tape: Tape, output_grad, *, need_input_grad: bool = False) -> Gradient:
    """Vector-Jacobian product of the recorded forward pass.

    For batched tapes the parameter gradient is summed over rows, so the
    caller folds any averaging into ``output_grad``.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise ContractViolation("tape was recorded on a different or since-updated network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.preacts[-1].shape:
        raise ContractViolation(
            f"output_grad shape {g.shape} does not match output {tape.preacts[-1].shape}"
        )
    grads: list[np.ndarray] = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        z, a_in = tape.preacts[i], tape.inputs[i]
        if layer.activation == "relu":
            g = g * (z > 0.0)
        if g.ndim == 1:
            dw = np.outer(g, a_in)
            db = g.copy()
        else:
            dw = g.T @ a_in
            db = g.sum(axis=0)
        grads.append(db)
        grads.append(dw)
        if i or need_input_grad:
            g = g @ layer.weight
    grads.reverse()
    return Gradient(grads, g if need_input_grad else None)


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    timestep: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")


def sgd(learning_rate: float) -> OptimizerState:
    return OptimizerState("sgd", learning_rate)


def adam(learning_rate: float = 1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> OptimizerState:
    return OptimizerState("adam", learning_rate, beta1, beta2, epsilon)


def apply_update(model, grad: Gradient, opt: OptimizerState):
    """Step every parameter of ``model`` (anything with ``params()``) in place.

    Non-finite gradients are refused before any parameter is touched.
    Returns ``(model, opt)``.
    """
    params = model.params()
    if len(params) != len(grad.arrays) or any(p.shape != g.shape for p, g in zip(params, grad.arrays)):
        raise ContractViolation("gradient is not shape-congruent with the model")
    if not grad.is_finite():
        raise NonFiniteError("refusing to apply a non-finite gradient")
    lr = opt.learning_rate
    if opt.kind == "sgd":
        for p, g in zip(params, grad.arrays):
            p -= lr * g
    else:
        if not opt.m:
            opt.m = [np.zeros_like(p) for p in params]
            opt.v = [np.zeros_like(p) for p in params]
        opt.timestep += 1
        c1 = 1.0 - opt.beta1**opt.timestep
        c2 = 1.0 - opt.beta2**opt.timestep
        for p, g, m, v in zip(params, grad.arrays, opt.m, opt.v):
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.epsilon)
    if hasattr(model, "version"):
        model.version += 1
    return model, opt


def numeric_gradient(params: Sequence[np.ndarray], f: Callable[[], float], h: float = 1e-5):
    """Central differences of ``f`` w.r.t. every entry of ``params``.

    ``f`` must read the arrays in ``params`` (they are perturbed in place and
    restored afterwards).
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Worst per-array ||a - n|| / max(||a||, ||n||).

    Norm-wise rather than entry-wise so that entries whose true gradient
    cancels to zero are not judged on finite-difference noise alone.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n)) / denom)
    return worst


def grad_check(net: DenseNet, loss, x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``loss(output)`` returns ``(value, d value / d output)``.
    """
    out, tape = forward(net, x)
    _, dout = loss(out)
    analytic = backward(net, tape, dout).arrays
    numeric = numeric_gradient(net.params(), lambda: float(loss(predict(net, x))[0]), h)
    return max_relative_error(analytic, numeric)


def min_abs_preactivation(net: DenseNet, x) -> float:
    """Distance of the nearest relu unit from its kink for this input."""
    _, tape = forward(net, x)
    vals = [np.abs(z).min() for z, l in zip(tape.preacts, net.layers) if l.activation == "relu"]
    return float(min(vals)) if vals else float("inf")
