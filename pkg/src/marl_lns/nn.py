"""Feed-forward networks with hand-written backpropagation.

Everything is float64 numpy. ``Mlp.forward`` returns the output and a cache;
``Mlp.backward`` consumes the cache and returns gradients in the same order as
``Mlp.parameters()``.

Checkpoint format
-----------------
``save_checkpoint`` writes a numpy ``.npz`` archive: one array per named
tensor (``"<prefix>.W<i>"`` / ``"<prefix>.b<i>"``) plus a ``__format__``
entry holding the integer format version. Shapes travel with the arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = 1


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def orthogonal_init(shape, gain: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain`` (QR of a Gaussian matrix, sign-fixed)."""
    if len(shape) != 2:
        raise ValueError(f"orthogonal_init needs a 2-D shape, got {shape}")
    rng = np.random.default_rng() if rng is None else rng
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q)


class Mlp:
    """Dense network, tanh on hidden layers, linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 hidden_gain: float = np.sqrt(2.0), output_gain: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        rng = np.random.default_rng(0) if rng is None else rng
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            gain = output_gain if i == n_layers - 1 else hidden_gain
            self.W.append(orthogonal_init((self.sizes[i], self.sizes[i + 1]), gain, rng))
            self.b.append(np.zeros(self.sizes[i + 1]))
        self._version = 0

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        named = {}
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            named[f"{prefix}W{i}"] = W
            named[f"{prefix}b{i}"] = b
        return named

    def mark_updated(self) -> None:
        """Invalidate outstanding forward caches after an in-place parameter change."""
        self._version += 1

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (B, {self.in_dim}), got {x.shape}")
        inputs = []
        h = x
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            inputs.append(h)
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
        return h, (self._version, inputs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray):
        version, inputs = cache
        if version != self._version:
            raise StaleCacheError("parameters changed since this forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        grads: list[np.ndarray] = [None] * (2 * len(self.W))
        for i in range(len(self.W) - 1, -1, -1):
            h_in = inputs[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.W[i].T
            if i > 0:
                # inputs[i] is tanh output of layer i-1
                g = g * (1.0 - h_in * h_in)
        return grads, g

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, param in self.named_parameters(prefix).items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != param.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {param.shape}")
            param[...] = src
        self.mark_updated()


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
              names: Sequence[str] | None = None) -> list[np.ndarray]:
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"tensor {k}: param shape {p.shape} vs grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            label = names[k] if names is not None else f"#{k}"
            raise NonFiniteGradientError(f"non-finite gradient in tensor {label}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float = 10.0):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(grads, pre_clip_norm)``; scaling happens in place.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm


def save_checkpoint(path, nets: dict[str, Mlp]) -> None:
    arrays = {"__format__": np.array(CHECKPOINT_FORMAT)}
    for prefix, net in nets.items():
        arrays.update(net.state_dict(prefix + "."))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, nets: dict[str, Mlp]) -> None:
    with np.load(path) as data:
        version = int(data["__format__"])
        if version != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {version}")
        for prefix, net in nets.items():
            net.load_state_dict(dict(data), prefix + ".")


def finite_difference_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                            grads: Sequence[np.ndarray], probes: int = 100,
                            eps: float = 1e-4, rng: np.random.Generator | None = None,
                            abs_floor: float = 1e-6) -> float:
    """Worst relative error between analytic grads and central differences.

    ``probes`` random scalar coordinates are perturbed by ``+-eps``. The
    relative error is ``|a - n| / max(|a|, |n|, abs_floor)``, so gradients
    smaller than ``abs_floor`` are compared on an absolute scale.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = np.unravel_index(int(rng.integers(params[k].size)), params[k].shape)
        orig = params[k][idx]
        params[k][idx] = orig + eps
        up = loss_fn()
        params[k][idx] = orig - eps
        down = loss_fn()
        params[k][idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[k][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
        worst = max(worst, err)
    return worst
