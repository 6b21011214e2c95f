"""Minimal dense feed-forward networks with explicit forward/backward passes
and an Adam optimizer.

This is the substrate for every anchor head (opacity, color, covariance and
the residual geometry covariance).  Parameters live in plain float64 numpy
arrays; forward/backward are pure functions of (params, input) and support
batched inputs of shape (B, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidInputError

ACTIVATIONS = ("none", "relu", "sigmoid", "tanh")


@dataclass
class MlpLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "none"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError("layer weight/bias shapes do not chain")


@dataclass
class MlpParams:
    layers: list[MlpLayer]

    def __post_init__(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise InvalidInputError("consecutive layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat list view [W0, b0, W1, b1, ...] referencing the live arrays."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([MlpLayer(l.weight.copy(), l.bias.copy(), l.activation)
                          for l in self.layers])


def init_mlp(dims: list[int], activations: list[str], rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    if len(activations) != len(dims) - 1:
        raise InvalidInputError("need one activation per layer")
    layers = []
    for din, dout, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(din)
        layers.append(MlpLayer(rng.uniform(-bound, bound, (dout, din)),
                               rng.uniform(-bound, bound, dout), act))
    return MlpParams(layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return np.tanh(z)


def _activate_backward(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return 1.0 - a * a


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass.  x: (in,) or (B, in).  Returns (y, tape)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != params.in_dim:
        raise InvalidInputError(
            f"input dim {h.shape[1]} != first layer dim {params.in_dim}")
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("non-finite input")
    tape = []
    for layer in params.layers:
        z = h @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        tape.append((h, z, a))
        h = a
    return (h[0] if single else h), tape


def mlp_backward(
    params: MlpParams, tape: list, grad_y: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Exact reverse-mode gradients of sum(y * grad_y).

    Returns (grad_params with the same layout, grad_x).
    """
    grad_y = np.asarray(grad_y, dtype=np.float64)
    single = grad_y.ndim == 1
    g = np.atleast_2d(grad_y)
    if len(tape) != len(params.layers):
        raise InvalidInputError("tape does not match parameters")
    if g.shape[1] != params.out_dim or g.shape[0] != tape[-1][2].shape[0]:
        raise InvalidInputError("grad_y shape mismatch")
    grad_layers: list[MlpLayer] = []
    for layer, (h, z, a) in zip(reversed(params.layers), reversed(tape)):
        gz = g * _activate_backward(z, a, layer.activation)
        gw = gz.T @ h
        gb = gz.sum(axis=0)
        g = gz @ layer.weight
        grad_layers.append(MlpLayer(gw, gb, layer.activation))
    grad_layers.reverse()
    return MlpParams(grad_layers), (g[0] if single else g)


def scaled_clone(params: MlpParams, lam: float) -> MlpParams:
    """Clone with every weight and bias multiplied by lam."""
    if not np.isfinite(lam):
        raise InvalidInputError("scale factor must be finite")
    return MlpParams([MlpLayer(lam * l.weight, lam * l.bias, l.activation)
                      for l in params.layers])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam accumulators for a list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], t=0, lr=lr, **kw)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> tuple[list[np.ndarray], AdamState, bool]:
    """One Adam update with bias correction.

    Returns (new params, new state, skipped).  A non-finite gradient skips
    the whole update and leaves the state untouched (skipped=True).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("parameter/gradient/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidInputError("parameter/gradient shape mismatch")
    if any(not np.all(np.isfinite(g)) for g in grads):
        return params, state, True
    lr = state.lr if lr is None else lr
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = state.beta1 * m + (1 - state.beta1) * g
        v2 = state.beta2 * v + (1 - state.beta2) * g * g
        step = lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + state.eps)
        new_p.append(p - step)
        new_m.append(m2)
        new_v.append(v2)
    st = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_p, st, False


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]
