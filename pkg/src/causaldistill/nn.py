"""Minimal fully-connected networks with explicit forward/backward passes.

Everything is float64 and deterministic given (parameters, input). Hidden
layers use SiLU by default; the output layer is linear. Gradient correctness
is guarded by the central-finite-difference harness in :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mlp",
    "MlpGrads",
    "AdamState",
    "NonFiniteGradientError",
    "mlp_forward",
    "mlp_backward",
    "per_example_param_grads",
    "adam_step",
    "grad_check",
    "GradCheckReport",
]

_ACTIVATIONS = ("silu", "relu", "tanh", "identity")


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN/inf; the optimizer refuses to apply it."""


def _act(name: str, s: np.ndarray) -> np.ndarray:
    if name == "silu":
        return s / (1.0 + np.exp(-s))
    if name == "relu":
        return np.maximum(s, 0.0)
    if name == "tanh":
        return np.tanh(s)
    return s


def _act_deriv(name: str, s: np.ndarray) -> np.ndarray:
    if name == "silu":
        sig = 1.0 / (1.0 + np.exp(-s))
        return sig * (1.0 + s * (1.0 - sig))
    if name == "relu":
        return (s > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(s) ** 2
    return np.ones_like(s)


class Mlp:
    """Fully-connected net; weights ``W[l]`` have shape (fan_in, fan_out).

    ``widths`` runs input -> hidden... -> output. The activation applies to
    hidden layers only. Initialization is uniform with 1/sqrt(fan_in) scale.
    """

    def __init__(self, widths, activation: str = "silu", rng: np.random.Generator | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"widths must list >= 2 positive sizes, got {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.widths = widths
        self.activation = activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.widths = list(self.widths)
        other.activation = self.activation
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def params_flat(self) -> np.ndarray:
        """Parameters as one float64 vector, layer order W0, b0, W1, b1, ..."""
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_params_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        i = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[i:i + w.size].reshape(w.shape)
            i += w.size
            b[...] = vec[i:i + b.size]
            i += b.size


@dataclass
class MlpGrads:
    """Parameter gradients mirroring an Mlp's weight/bias lists."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def scaled(self, c: float) -> "MlpGrads":
        return MlpGrads([c * w for w in self.weights], [c * b for b in self.biases])

    def add_(self, other: "MlpGrads") -> "MlpGrads":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self

    @classmethod
    def zeros_like(cls, net: Mlp) -> "MlpGrads":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def mlp_forward(net: Mlp, x: np.ndarray):
    """Evaluate the net on a batch.

    ``x`` is (B, d_in) or (d_in,); returns (output, cache) where the cache
    holds the layer inputs and pre-activations needed by
    :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.widths[0]:
        raise ValueError(f"input width {x.shape[1]} != first layer width {net.widths[0]}")
    inputs = [x]
    pre = []
    a = x
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ w + b
        pre.append(s)
        a = s if l == last else _act(net.activation, s)
        if l != last:
            inputs.append(a)
    out = a[0] if squeeze else a
    return out, (inputs, pre, squeeze)


def mlp_backward(net: Mlp, cache, dy: np.ndarray):
    """Backpropagate an output gradient through a cached forward pass.

    Returns (MlpGrads, input_gradient). Parameter gradients are summed over
    the batch; the input gradient keeps its per-row shape.
    """
    inputs, pre, squeeze = cache
    dy = np.asarray(dy, dtype=np.float64)
    if squeeze:
        dy = dy[None, :] if dy.ndim == 1 else np.atleast_2d(dy)
    if dy.shape != pre[-1].shape:
        raise ValueError(f"output gradient shape {dy.shape} != forward output shape {pre[-1].shape}")
    grads_w = [None] * net.n_layers
    grads_b = [None] * net.n_layers
    delta = dy
    for l in range(net.n_layers - 1, -1, -1):
        if l != net.n_layers - 1:
            delta = delta * _act_deriv(net.activation, pre[l])
        grads_w[l] = inputs[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l].T
    dx = delta[0] if squeeze else delta
    return MlpGrads(grads_w, grads_b), dx


def per_example_param_grads(net: Mlp, cache, dy: np.ndarray) -> np.ndarray:
    """Per-row parameter gradients as a (B, n_params) matrix.

    Same math as :func:`mlp_backward` but without the batch reduction; used
    by the gradient-variance experiment where single-example gradients are
    the quantity of interest.
    """
    inputs, pre, squeeze = cache
    dy = np.asarray(dy, dtype=np.float64)
    if squeeze:
        dy = np.atleast_2d(dy)
    batch = dy.shape[0]
    pieces = [None] * net.n_layers
    delta = dy
    for l in range(net.n_layers - 1, -1, -1):
        if l != net.n_layers - 1:
            delta = delta * _act_deriv(net.activation, pre[l])
        gw = np.einsum("bi,bo->bio", inputs[l], delta)
        pieces[l] = np.concatenate([gw.reshape(batch, -1), delta], axis=1)
        delta = delta @ net.weights[l].T
    return np.concatenate(pieces, axis=1)


@dataclass
class AdamState:
    """Adam moment accumulators matching one Mlp's parameter layout."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def init(cls, net: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in net.weights],
            v_w=[np.zeros_like(w) for w in net.weights],
            m_b=[np.zeros_like(b) for b in net.biases],
            v_b=[np.zeros_like(b) for b in net.biases],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(net: Mlp, grads: MlpGrads, state: AdamState) -> None:
    """One Adam update with bias correction, applied in place.

    Non-finite gradients raise :class:`NonFiniteGradientError` instead of
    corrupting parameters.
    """
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient at Adam step "
                                         f"{state.step + 1}; aborting update")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(net.weights + net.biases,
                          grads.weights + grads.biases,
                          state.m_w + state.m_b,
                          state.v_w + state.v_b):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: int
    tolerance: float


def grad_check(net: Mlp, loss_fn, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(net)`` must return (loss, MlpGrads). Every parameter of the net
    is perturbed by +-step; relative error uses max(|analytic|, |numeric|)
    with a 1e-6 floor (central differences carry ~1e-10 absolute roundoff at
    step 1e-5, so smaller gradients cannot be resolved relatively). Exactly
    zero pairs compare as equal.
    """
    _, grads = loss_fn(net)
    analytic = grads.flat()
    base = net.params_flat()
    numeric = np.empty_like(analytic)
    for i in range(base.size):
        pert = base.copy()
        pert[i] = base[i] + step
        net.set_params_flat(pert)
        up, _ = loss_fn(net)
        pert[i] = base[i] - step
        net.set_params_flat(pert)
        down, _ = loss_fn(net)
        numeric[i] = (up - down) / (2.0 * step)
    net.set_params_flat(base)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    # exact zeros on both sides are a perfect match, not a 0/0 artifact
    rel[(analytic == 0.0) & (numeric == 0.0)] = 0.0
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_err=float(rel[worst]),
        passed=bool(rel[worst] <= tolerance),
        worst_index=worst,
        tolerance=tolerance,
    )
