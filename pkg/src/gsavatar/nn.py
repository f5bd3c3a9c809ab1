"""MLP layers, parameter bookkeeping and the Adam optimizer.

All trainable state lives in named float64 arrays inside a
:class:`ParameterStore`.  Each training step registers every array as leaf
nodes on a fresh tape, runs the forward graph, and reads gradients back by
slot range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Numeric, Tape


class ParameterStore:
    """Named trainable arrays with per-array group labels."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.groups: dict[str, str] = {}

    def add(self, name: str, array: np.ndarray, group: str = "default") -> np.ndarray:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.arrays[name] = np.asarray(array, dtype=np.float64)
        self.groups[name] = group
        return self.arrays[name]

    def register(self, eng):
        """Put every parameter on the engine; returns name -> handle.

        On a :class:`Tape` the handle is an id array (leaf slots); on
        :class:`Numeric` it is the parameter array itself.
        """
        if eng.recording:
            return {name: eng.constant(arr) for name, arr in self.arrays.items()}
        return dict(self.arrays)

    def gradients(self, handles, grads: np.ndarray) -> dict[str, np.ndarray]:
        """Slice the flat adjoint buffer back into per-parameter arrays."""
        return {name: grads[ids] for name, ids in handles.items()}

    def total_count(self) -> int:
        return sum(a.size for a in self.arrays.values())


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Mlp:
    """Fully-connected net: ReLU on hidden layers, identity on the output.

    ``layer_dims`` lists [input, hidden..., output]; the default everywhere
    in this project is one hidden layer (two weight matrices).  Offset heads
    are built with ``zero_output=True`` so the whole avatar starts exactly
    at its undeformed rest state.
    """

    def __init__(self, layer_dims, rng: np.random.Generator | None = None,
                 zero_output: bool = False, name: str = "mlp"):
        if len(layer_dims) < 2:
            raise ValueError("Mlp needs at least an input and an output dimension")
        self.layer_dims = [int(d) for d in layer_dims]
        self.name = name
        rng = rng or np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (k, m) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            last = i == len(self.layer_dims) - 2
            if last and zero_output:
                self.weights.append(np.zeros((m, k)))
            else:
                self.weights.append(glorot_uniform(rng, m, k))
            self.biases.append(np.zeros(m))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def add_to(self, store: ParameterStore, group: str = "mlps") -> None:
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            store.add(f"{self.name}.w{i}", W, group)
            store.add(f"{self.name}.b{i}", b, group)

    def handles(self, handles_or_none, eng):
        """Per-layer (W, b) handles, registering privately if none given."""
        if handles_or_none is None:
            return [(eng.constant(W), eng.constant(b)) for W, b in zip(self.weights, self.biases)]
        return [
            (handles_or_none[f"{self.name}.w{i}"], handles_or_none[f"{self.name}.b{i}"])
            for i in range(len(self.weights))
        ]

    def forward(self, eng, X, handles=None):
        """Batched forward of an (n, in_dim) batch -> (n, out_dim)."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected (n, {self.in_dim}) input, got {X.shape}")
        layers = self.handles(handles, eng)
        out = X
        for i, (w, b) in enumerate(layers):
            out = eng.linear(out, w, b)
            if i < len(layers) - 1:
                out = eng.relu(out)
        return out


def forward_mlp(mlp: Mlp, x, tape) -> np.ndarray:
    """Run one input vector through the MLP on the given engine.

    Plain floats are placed on the tape as constants; an id array passes
    through untouched, so gradients flow to upstream nodes.
    """
    x = np.asarray(x)
    if x.ndim != 1 or x.size != mlp.in_dim:
        raise ValueError(f"forward_mlp: expected length-{mlp.in_dim} vector, got shape {x.shape}")
    if tape.recording and not np.issubdtype(x.dtype, np.integer):
        x = tape.constant(x)
    return mlp.forward(tape, x.reshape(1, -1))[0]


@dataclass
class AdamState:
    """Bias-corrected Adam over a dict of named parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr_scale: dict[str, float] | None = None):
    """One Adam update, in place; returns the updated param dict."""
    state.ensure(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64).reshape(p.shape)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = state.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


NUMERIC = Numeric()
