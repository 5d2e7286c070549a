"""Dense networks with hand-written backprop, action distributions and optimizers.

Every network keeps its parameters in one flat float64 vector. Layer weights
are views into that vector, so flattening and unflattening are free and
bit-exact, and gradients come back in the same layout.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ConfigurationError(ValueError):
    """Raised when shapes or settings do not fit together."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


def relu(x):
    return np.maximum(x, 0.0)


class MLP:
    """Fully connected ReLU network with a linear output layer.

    Parameters are laid out layer by layer: ``W0`` (in x out, row-major),
    ``b0``, ``W1``, ``b1``, ...
    """

    def __init__(self, sizes, rng=None, params=None, out_scale=1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ConfigurationError("an MLP needs at least input and output sizes")
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b))
        self.size = offset
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (self.size,):
                raise ConfigurationError(f"expected {self.size} parameters, got {params.shape}")
            self.params = params.copy()
        else:
            self.params = self.init_params(rng if rng is not None else np.random.default_rng(0), out_scale)

    def init_params(self, rng, out_scale=1.0):
        params = np.zeros(self.size)
        n_layers = len(self._slices)
        for i, ((w, _), fan_in, fan_out) in enumerate(zip(self._slices, self.sizes[:-1], self.sizes[1:])):
            scale = math.sqrt(2.0 / fan_in)
            if i == n_layers - 1:
                scale = out_scale / math.sqrt(fan_in)
            params[w] = rng.normal(0.0, scale, size=fan_in * fan_out)
        return params

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def unflatten(self, params=None):
        """Return ``[(W, b), ...]`` views into ``params``."""
        p = self.params if params is None else params
        return [
            (p[w].reshape(fan_in, fan_out), p[b])
            for (w, b), fan_in, fan_out in zip(self._slices, self.sizes[:-1], self.sizes[1:])
        ]

    def flatten(self, layers):
        out = np.empty(self.size)
        for (w, b), (W, bias) in zip(self._slices, layers):
            out[w] = np.asarray(W, dtype=np.float64).ravel()
            out[b] = bias
        return out

    def forward(self, x, params=None):
        """Batched forward pass. Returns ``(output, cache)``; ``cache`` feeds backward."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"input has dimension {x.shape[-1]}, network expects {self.in_dim}")
        layers = self.unflatten(params)
        acts = [x]
        h = x
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            h = z if i == len(layers) - 1 else relu(z)
            acts.append(h)
        out = acts[-1][0] if single else acts[-1]
        return out, (layers, acts, single)

    def backward(self, cache, grad_out):
        """Gradient of ``sum(grad_out * output)`` w.r.t. parameters and input."""
        layers, acts, single = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        grad = np.empty(self.size)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            w_sl, b_sl = self._slices[i]
            grad[w_sl] = (acts[i].T @ g).ravel()
            grad[b_sl] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * (acts[i] > 0.0)
        grad_in = g[0] if single else g
        return grad, grad_in


@dataclass
class GaussianOut:
    mean: np.ndarray
    log_std: np.ndarray  # already clamped, shape (act_dim,)


@dataclass
class CategoricalOut:
    logits: np.ndarray


class PolicyNet:
    """Two-hidden-layer policy with a Gaussian or categorical head.

    Gaussian heads use a state-independent log-std vector stored after the
    body parameters in the flat parameter vector.
    """

    def __init__(self, obs_dim, act_dim, hidden=64, kind="gaussian", rng=None,
                 log_std_init=0.0, log_std_bounds=(-10.0, 2.0), out_scale=0.01):
        if kind not in ("gaussian", "categorical"):
            raise ConfigurationError(f"unknown policy head {kind!r}")
        self.kind = kind
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        self.body = MLP((obs_dim, hidden, hidden, act_dim), rng=rng, out_scale=out_scale)
        n_extra = act_dim if kind == "gaussian" else 0
        self.size = self.body.size + n_extra
        self.params = np.concatenate([self.body.params, np.full(n_extra, float(log_std_init))])

    def copy_params(self):
        return self.params.copy()

    def _split(self, params):
        p = self.params if params is None else params
        if p.shape != (self.size,):
            raise ConfigurationError(f"expected {self.size} policy parameters, got {p.shape}")
        return p[: self.body.size], p[self.body.size:]

    def forward(self, obs, params=None):
        body_p, log_std_raw = self._split(params)
        out, cache = self.body.forward(obs, body_p)
        if self.kind == "categorical":
            return CategoricalOut(out), cache
        lo, hi = self.log_std_bounds
        return GaussianOut(out, np.clip(log_std_raw, lo, hi)), (cache, log_std_raw)

    def backward(self, cache, grad_head, grad_log_std=None):
        """Flat gradient given upstream gradients on the head outputs.

        ``grad_head`` is w.r.t. the mean (Gaussian) or logits (categorical);
        ``grad_log_std`` is w.r.t. the clamped log-std, summed over the batch.
        """
        if self.kind == "categorical":
            g_body, _ = self.body.backward(cache, grad_head)
            return g_body
        body_cache, log_std_raw = cache
        g_body, _ = self.body.backward(body_cache, grad_head)
        g_ls = np.zeros(self.act_dim) if grad_log_std is None else np.asarray(grad_log_std, dtype=np.float64)
        lo, hi = self.log_std_bounds
        g_ls = np.where((log_std_raw >= lo) & (log_std_raw <= hi), g_ls, 0.0)
        return np.concatenate([g_body, g_ls])

    def action_means(self, obs, params=None):
        """Gaussian means, or action probabilities for categorical heads."""
        out, _ = self.forward(obs, params)
        if self.kind == "categorical":
            return softmax(out.logits)
        return out.mean


class ValueNet:
    """Same body as the policy with a scalar output."""

    def __init__(self, obs_dim, hidden=64, rng=None, out_scale=1.0):
        self.body = MLP((obs_dim, hidden, hidden, 1), rng=rng, out_scale=out_scale)
        self.size = self.body.size

    @property
    def params(self):
        return self.body.params

    @params.setter
    def params(self, value):
        self.body.params = value

    def forward(self, obs, params=None):
        out, cache = self.body.forward(obs, self.params if params is None else params)
        return out[..., 0], cache

    def backward(self, cache, grad_value):
        g = np.asarray(grad_value, dtype=np.float64)[..., None]
        grad, _ = self.body.backward(cache, g)
        return grad


# -- distributions ---------------------------------------------------------

def gaussian_log_prob(mean, log_std, action):
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    z = (np.asarray(action, dtype=np.float64) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_log_prob_grads(mean, log_std, action):
    """Per-sample derivatives of the log density w.r.t. mean and log-std."""
    inv_var = np.exp(-2.0 * np.asarray(log_std, dtype=np.float64))
    diff = np.asarray(action, dtype=np.float64) - mean
    d_mean = diff * inv_var
    d_log_std = diff * diff * inv_var - 1.0
    return d_mean, d_log_std


def gaussian_entropy(log_std):
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(np.sum(0.5 * (1.0 + LOG_2PI) + log_std))


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q):
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    var_p = np.exp(2.0 * log_std_p)
    inv_var_q = np.exp(-2.0 * log_std_q)
    diff = mean_p - mean_q
    return np.sum(log_std_q - log_std_p + 0.5 * (var_p + diff * diff) * inv_var_q - 0.5, axis=-1)


def gaussian_kl_grads(mean_p, log_std_p, mean_q, log_std_q):
    """Derivatives of KL(p || q) w.r.t. the parameters of ``q``."""
    var_p = np.exp(2.0 * log_std_p)
    inv_var_q = np.exp(-2.0 * log_std_q)
    diff = mean_p - mean_q
    d_mean_q = -diff * inv_var_q
    d_log_std_q = 1.0 - (var_p + diff * diff) * inv_var_q
    return d_mean_q, d_log_std_q


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def categorical_log_prob(logits, action):
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    action = np.asarray(action, dtype=np.int64)
    return np.take_along_axis(lp, action[..., None], axis=-1)[..., 0]


def categorical_log_prob_grad(logits, action):
    """d log p(action) / d logits = onehot(action) - softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    onehot = np.eye(logits.shape[-1])[np.asarray(action, dtype=np.int64)]
    return onehot - softmax(logits)


def categorical_entropy(logits):
    lp = log_softmax(logits)
    return -np.sum(np.exp(lp) * lp, axis=-1)


def categorical_kl(logits_p, logits_q):
    lp = log_softmax(logits_p)
    lq = log_softmax(logits_q)
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def categorical_kl_grad(logits_p, logits_q):
    """d KL(p || q) / d logits_q = softmax(q) - softmax(p)."""
    return softmax(logits_q) - softmax(logits_p)


def sample_action(head, rng):
    """Draw one action (or a batch) from a head output; returns ``(action, log_prob)``."""
    if isinstance(head, CategoricalOut):
        probs = softmax(head.logits)
        if probs.ndim == 1:
            action = int(rng.choice(probs.shape[0], p=probs))
            return action, float(categorical_log_prob(head.logits, action))
        u = rng.random(probs.shape[0])[:, None]
        action = np.minimum((np.cumsum(probs, axis=-1) < u).sum(axis=-1), probs.shape[-1] - 1)
        return action, categorical_log_prob(head.logits, action)
    eps = rng.standard_normal(np.shape(head.mean))
    action = head.mean + np.exp(head.log_std) * eps
    return action, gaussian_log_prob(head.mean, head.log_std, action)


# -- optimizers ------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    kind: str = "sga"  # "sga" or "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step: int = 0


def clip_by_norm(g, max_norm):
    if max_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


def apply_gradient(params, grad, opt: OptimizerState):
    """One ascent step; returns new parameters and advances ``opt`` in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ConfigurationError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient rejected", where="apply_gradient")
    opt.step += 1
    if opt.kind == "sga":
        return params + opt.lr * grad
    if opt.kind != "adam":
        raise ConfigurationError(f"unknown optimizer {opt.kind!r}")
    if opt.m is None:
        opt.m = np.zeros_like(params)
        opt.v = np.zeros_like(params)
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    return params + opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def param_hash(params) -> str:
    """Short content hash of a parameter vector."""
    return hashlib.blake2b(np.ascontiguousarray(params, dtype=np.float64).tobytes(), digest_size=8).hexdigest()
