"""Fully connected networks with hand-written backprop, Adam, and a Gaussian policy head.

Arrays are batch-first: a layer maps ``x @ W + b`` with ``W`` of shape
``(fan_in, fan_out)``. Single samples (1-D inputs) are accepted and
returned as 1-D outputs.
"""
import math
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01
LOG_STD_MIN = math.log(0.01)
LOG_STD_MAX = math.log(1.0)
POLICY_LAYOUT = (19, 128, 128, 6)
VALUE_LAYOUT = (19, 128, 128, 1)
LOG_2PI = math.log(2.0 * math.pi)


class ContractError(ValueError):
    """Shape mismatch or stale cache passed to a network routine."""


@dataclass
class MlpParams:
    weights: list
    biases: list
    log_std: np.ndarray = None

    @property
    def layout(self):
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    def arrays(self):
        """Every parameter array in a fixed order (weights, biases, log_std)."""
        out = list(self.weights) + list(self.biases)
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         None if self.log_std is None else self.log_std.copy())

    def zeros_like(self):
        return MlpParams([np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases],
                         None if self.log_std is None else np.zeros_like(self.log_std))

    def with_arrays(self, arrays):
        n = len(self.weights)
        arrays = list(arrays)
        return MlpParams(arrays[:n], arrays[n:2 * n], arrays[2 * n] if self.log_std is not None else None)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflat(self, vec):
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return self.with_arrays(out)

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def mlp_init(seed, layout, log_std_init=None, out_gain=1.0):
    """He-uniform weights (leaky-ReLU gain), zero biases.

    ``out_gain`` scales the last layer; a small value starts the policy
    near its action centre. ``log_std_init`` adds a state-independent
    log standard deviation per output.
    """
    if len(layout) < 2:
        raise ContractError("layout needs at least an input and an output size")
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(layout[:-1], layout[1:])):
        bound = gain * math.sqrt(3.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if k == len(layout) - 2:
            W *= out_gain
        weights.append(W)
        biases.append(np.zeros(fan_out))
    log_std = None
    if log_std_init is not None:
        log_std = np.full(layout[-1], float(log_std_init))
    return MlpParams(weights, biases, log_std)


@dataclass
class ForwardCache:
    params: MlpParams
    inputs: list
    pre: list
    single: bool


def _leaky(z):
    return np.where(z > 0.0, z, LEAKY_SLOPE * z)


def forward(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.weights[0].shape[0]:
        raise ContractError(f"input shape {x.shape} does not match layout {params.layout}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = z if k == last else _leaky(z)
    return (h[0] if single else h), ForwardCache(params, inputs, pre, single)


def backward(params, cache, dy):
    """Gradients of a scalar loss given ``dL/dy``.

    Returns ``(grads, dx)`` where ``grads`` is an ``MlpParams`` holding
    weight and bias gradients (``log_std`` gradient zero; the policy head
    fills it) and ``dx`` is the gradient with respect to the input.
    """
    if cache.params is not params:
        raise ContractError("cache was produced by a different parameter set")
    g = np.asarray(dy, dtype=float)
    g = g[None, :] if cache.single else g
    if g.shape != cache.pre[-1].shape:
        raise ContractError(f"upstream gradient shape {g.shape} != output {cache.pre[-1].shape}")
    n = len(params.weights)
    dW, db = [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        if k != n - 1:
            g = g * np.where(cache.pre[k] > 0.0, 1.0, LEAKY_SLOPE)
        dW[k] = cache.inputs[k].T @ g
        db[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    grads = MlpParams(dW, db, None if params.log_std is None else np.zeros_like(params.log_std))
    return grads, (g[0] if cache.single else g)


def grad_norm(grads):
    return math.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays()))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, 0, lr, beta1, beta2, eps)


def adam_step(params, grads, opt):
    """One bias-corrected Adam update; returns new params and new optimizer state."""
    t = opt.t + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), opt.m, opt.v):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_p.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    out = params.with_arrays(new_p)
    if out.log_std is not None:
        np.clip(out.log_std, LOG_STD_MIN, LOG_STD_MAX, out=out.log_std)
    return out, AdamState(new_m, new_v, t, opt.lr, opt.beta1, opt.beta2, opt.eps)


@dataclass
class ActionMap:
    """Affine map from the Gaussian coordinate ``u`` to rotor thrust, clamped to the box.

    ``T = clip(center + scale * basis @ u, 0, thrust_max)``. ``basis``
    defaults to the identity; ``mirror_perm`` and ``mirror_signs`` describe
    how ``u`` transforms when the thrust vector is mirrored.
    """
    center: np.ndarray = field(default_factory=lambda: np.zeros(6))
    scale: float = 1.0
    thrust_max: float = 14.2
    basis: np.ndarray = None
    mirror_perm: tuple = (2, 3, 0, 1, 5, 4)
    mirror_signs: np.ndarray = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        n = self.center.size
        if self.basis is None:
            self.basis = np.eye(n)
        if self.mirror_signs is None:
            self.mirror_signs = np.ones(n)
        self._inv = np.linalg.inv(self.basis)

    def to_thrust(self, u):
        return np.clip(self.center + self.scale * (np.asarray(u) @ self.basis.T), 0.0, self.thrust_max)

    def to_raw(self, T):
        return ((np.asarray(T, dtype=float) - self.center) / self.scale) @ self._inv.T

    def mirror_raw(self, u):
        """Raw coordinate of the mirrored thrust command."""
        return np.asarray(u)[..., list(self.mirror_perm)] * self.mirror_signs


def gaussian_logprob(mean, log_std, u):
    """Diagonal Gaussian log density, summed over the last axis."""
    z = (np.asarray(u) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std):
    return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + LOG_2PI))


def policy_sample(mean, log_std, rng, amap=None):
    """Draw an action; returns ``(thrust, logp, u)``.

    ``logp`` is the density of the unclamped coordinate ``u``. Without an
    ``ActionMap`` the action is ``u`` itself.
    """
    u = mean + np.exp(log_std) * rng.standard_normal(np.shape(mean))
    action = u if amap is None else amap.to_thrust(u)
    return action, gaussian_logprob(mean, log_std, u), u


def logprob(mean, log_std, action, amap=None):
    """Log density of a thrust action via its pre-image under ``amap``."""
    u = action if amap is None else amap.to_raw(action)
    return gaussian_logprob(mean, log_std, u)
