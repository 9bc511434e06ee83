"""Dense MLPs with hand-written reverse-mode gradients and an Adam optimizer.

Everything is float64. Weights are stored as ``(out, in)`` matrices so a
single linear layer computes ``W @ x + b``; batched inputs are rows of a
2-D array and parameter gradients are summed over rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"MlpSpec needs at least 2 layer sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class ParamSet:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("ParamSet layer count does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(
                    f"layer {i}: got W{w.shape} b{b.shape}, "
                    f"expected W{(sizes[i + 1], sizes[i])} b{(sizes[i + 1],)}"
                )

    def arrays(self):
        """Yield ``(name, array)`` for every parameter tensor."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layer{i}.weight", w
            yield f"layer{i}.bias", b

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for _, a in self.arrays())

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParamSet":
        sizes = spec.layer_sizes
        return cls(
            spec,
            [np.zeros((sizes[i + 1], sizes[i])) for i in range(spec.n_layers)],
            [np.zeros(sizes[i + 1]) for i in range(spec.n_layers)],
        )

    def zeros_like(self) -> "ParamSet":
        return ParamSet.zeros(self.spec)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """Fan-in uniform init: every entry ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    sizes = spec.layer_sizes
    weights, biases = [], []
    for i in range(spec.n_layers):
        bound = 1.0 / np.sqrt(sizes[i])
        weights.append(rng.uniform(-bound, bound, size=(sizes[i + 1], sizes[i])))
        biases.append(rng.uniform(-bound, bound, size=sizes[i + 1]))
    return ParamSet(spec, weights, biases)


def _as_batch(params: ParamSet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.n_in:
        raise ValueError(
            f"input has shape {x.shape if not single else x.shape[1:]}, "
            f"network expects {params.spec.n_in} features"
        )
    return x, single


@dataclass
class ForwardCache:
    """Layer inputs and post-activation outputs kept for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def forward_cached(params: ParamSet, x) -> tuple[np.ndarray, ForwardCache]:
    x, single = _as_batch(params, x)
    spec = params.spec
    cache = ForwardCache(single=single)
    h = x
    last = spec.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        act = spec.activation if i < last else spec.output_activation
        if act == "tanh":
            h = np.tanh(z)
        elif act == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
        cache.outputs.append(h)
    return (h[0] if single else h), cache


def mlp_forward(params: ParamSet, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    return forward_cached(params, x)[0]


def backward_cached(
    params: ParamSet, cache: ForwardCache, upstream
) -> tuple[ParamSet, np.ndarray]:
    spec = params.spec
    g = np.asarray(upstream, dtype=np.float64)
    if cache.single:
        g = g[None, :] if g.ndim == 1 else g
    n_rows = cache.inputs[0].shape[0]
    if g.shape != (n_rows, spec.n_out):
        raise ValueError(
            f"upstream gradient has shape {g.shape}, expected {(n_rows, spec.n_out)}"
        )
    last = spec.n_layers - 1
    w_grads: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    for i in range(last, -1, -1):
        act = spec.activation if i < last else spec.output_activation
        out = cache.outputs[i]
        if act == "tanh":
            g = g * (1.0 - out * out)
        elif act == "relu":
            g = g * (out > 0.0)
        w_grads[i] = g.T @ cache.inputs[i]
        b_grads[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    input_grad = g[0] if cache.single else g
    return ParamSet(spec, w_grads, b_grads), input_grad


def mlp_backward(params: ParamSet, x, upstream_grad) -> tuple[ParamSet, np.ndarray]:
    """Gradients of ``<upstream_grad, f(x)>`` w.r.t. parameters and input."""
    _, cache = forward_cached(params, x)
    return backward_cached(params, cache, upstream_grad)


def add_scaled(acc: ParamSet, other: ParamSet, scale: float = 1.0) -> ParamSet:
    """In-place ``acc += scale * other``; returns ``acc``."""
    for a, o in zip(acc.weights, other.weights):
        a += scale * o
    for a, o in zip(acc.biases, other.biases):
        a += scale * o
    return acc


def soft_update(target: ParamSet, source: ParamSet, tau: float) -> None:
    """Polyak averaging: ``target <- (1 - tau) * target + tau * source``."""
    for t, s in zip(target.weights + target.biases, source.weights + source.biases):
        t *= 1.0 - tau
        t += tau * s


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), lr=lr)


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update, applied in place.

    Raises FloatingPointError naming the first non-finite gradient tensor;
    in that case nothing is modified.
    """
    for name, g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = state.lr / c1
    for p, g, m, v in zip(
        params.weights + params.biases,
        grads.weights + grads.biases,
        state.m.weights + state.m.biases,
        state.v.weights + state.v.biases,
    ):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v / c2) + state.eps)
    return params, state
