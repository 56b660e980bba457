"""Dense feedforward networks with hand-written reverse-mode gradients.

Only what the diffusion actor and the critics need: batched MLP forward
passes that record a tape, a backward pass returning parameter *and* input
gradients (so gradients can be chained across reverse diffusion steps), and
an Adam optimizer.  Everything runs in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


def tensor(data, checked: bool = True) -> np.ndarray:
    """Convert ``data`` to a contiguous float64 array, rejecting NaN/Inf when checked."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if checked and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite entries")
    return arr


class Activation(str, enum.Enum):
    MISH = "mish"
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


def _mish_parts(z):
    """``(tanh(softplus(z)), sigmoid(z))`` from one exponential.

    tanh(log(1 + e)) = n / (n + 2) with n = e (e + 2); clamping at 20 changes
    nothing in double precision and keeps ``n`` finite.
    """
    e = np.exp(np.minimum(z, 20.0))
    n = e * (e + 2.0)
    return n / (n + 2.0), e / (1.0 + e)


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.MISH:
        return z * _mish_parts(z)[0]
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def activate_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation at pre-activation ``z``."""
    if kind is Activation.MISH:
        t, sig = _mish_parts(z)
        return t + z * (1.0 - t * t) * sig
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is Activation.TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


_GAINS = {
    Activation.MISH: np.sqrt(2.0),
    Activation.RELU: np.sqrt(2.0),
    Activation.TANH: 1.0,
    Activation.IDENTITY: 1.0,
}


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: Activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Tape:
    """Activation record of one forward pass."""

    net_id: int
    version: int
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


class FeedforwardNetwork:
    """Batched MLP ``[B, in_dim] -> [B, out_dim]``.

    Parameters are ordered ``W0, b0, W1, b1, ...``; every gradient list
    produced by :meth:`backward` follows the same order.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise DimensionError("network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise DimensionError(
                    f"layer {k} out_dim {layers[k].out_dim} != layer {k + 1} in_dim {layers[k + 1].in_dim}"
                )
        for layer in layers:
            if layer.bias.shape != (layer.out_dim,):
                raise DimensionError("bias shape does not match layer width")
        self.layers = list(layers)
        self.version = 0

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden: Activation = Activation.MISH,
        output: Activation = Activation.IDENTITY,
    ) -> "FeedforwardNetwork":
        """Kaiming-uniform (fan-in) weights, zero biases."""
        if len(sizes) < 2:
            raise DimensionError("need at least input and output sizes")
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output if k == len(sizes) - 2 else Activation(hidden)
            bound = _GAINS[act] * np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out), Activation(act)))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def mark_updated(self) -> None:
        """Invalidate outstanding tapes after an in-place parameter change."""
        self.version += 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.parameter_count:
            raise DimensionError(f"expected {self.parameter_count} parameters, got {flat.size}")
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        self.mark_updated()

    def copy(self) -> "FeedforwardNetwork":
        return FeedforwardNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected input [B, {self.in_dim}], got {list(x.shape)}")
        return x

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = self._check_input(x)
        for layer in self.layers:
            h = activate(layer.activation, h @ layer.weight + layer.bias)
        return h

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        h = self._check_input(x)
        inputs, pres = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight + layer.bias
            pres.append(z)
            h = activate(layer.activation, z)
        return h, Tape(id(self), self.version, inputs, pres)

    def backward(self, tape: Tape, output_gradient: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ``(param_grads, input_grad)`` for a loss with ``dL/dout = output_gradient``."""
        if tape.net_id != id(self) or tape.version != self.version:
            raise StaleTapeError("tape was recorded before the last parameter update")
        g = np.asarray(output_gradient, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        expected = tape.pre_activations[-1].shape
        if g.shape != expected:
            raise DimensionError(f"output gradient shape {list(g.shape)} != {list(expected)}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            gz = g * activate_grad(layer.activation, tape.pre_activations[k])
            grads[2 * k] = tape.inputs[k].T @ gz
            grads[2 * k + 1] = gz.sum(axis=0)
            g = gz @ layer.weight.T
        return grads, g

    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "sizes": self.sizes,
            "activations": [l.activation.value for l in self.layers],
        }
        arrays = {}
        for k, layer in enumerate(self.layers):
            arrays[f"W{k}"] = layer.weight
            arrays[f"b{k}"] = layer.bias
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "FeedforwardNetwork":
        layers = []
        for k, act in enumerate(meta["activations"]):
            layers.append(Layer(np.array(arrays[f"W{k}"]), np.array(arrays[f"b{k}"]), Activation(act)))
        net = cls(layers)
        if net.sizes != list(meta["sizes"]):
            raise DimensionError("stored sizes disagree with stored arrays")
        return net


def add_grads(a: list[np.ndarray], b: list[np.ndarray], scale: float = 1.0) -> list[np.ndarray]:
    return [x + scale * y for x, y in zip(a, b)]


def scale_grads(a: Iterable[np.ndarray], scale: float) -> list[np.ndarray]:
    return [scale * x for x in a]


def zero_grads(net: FeedforwardNetwork) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.parameters()]


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float, **kw) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray], gradients: Sequence[np.ndarray], state: AdamState
) -> tuple[Sequence[np.ndarray], AdamState]:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Raises NonFiniteError naming the flat parameter index of the first bad
    gradient entry; nothing is modified in that case.
    """
    if not (len(params) == len(gradients) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("params, gradients and optimizer moments are misaligned")
    offset = 0
    for p, g in zip(params, gradients):
        if p.shape != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        bad = np.flatnonzero(~np.isfinite(np.asarray(g)))
        if bad.size:
            raise NonFiniteError(f"non-finite gradient at parameter index {offset + int(bad[0])}")
        offset += p.size

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, gradients, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return params, state


class Adam:
    """Adam bound to one network; bumps the network version after each step."""

    def __init__(self, net: FeedforwardNetwork, learning_rate: float, **kw):
        self.net = net
        self.state = AdamState.for_params(net.parameters(), learning_rate, **kw)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.net.parameters(), grads, self.state)
        self.net.mark_updated()

    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        s = self.state
        meta = {
            "learning_rate": s.learning_rate,
            "beta1": s.beta1,
            "beta2": s.beta2,
            "epsilon": s.epsilon,
            "step_count": s.step_count,
        }
        arrays = {}
        for k, (m, v) in enumerate(zip(s.first_moment, s.second_moment)):
            arrays[f"m{k}"] = m
            arrays[f"v{k}"] = v
        return meta, arrays

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        s = self.state
        s.learning_rate = meta["learning_rate"]
        s.beta1, s.beta2, s.epsilon = meta["beta1"], meta["beta2"], meta["epsilon"]
        s.step_count = meta["step_count"]
        s.first_moment = [np.array(arrays[f"m{k}"]) for k in range(len(s.first_moment))]
        s.second_moment = [np.array(arrays[f"v{k}"]) for k in range(len(s.second_moment))]
