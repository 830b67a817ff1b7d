"""Trainable blocks: linear maps, multi-head attention, a Transformer-encoder
layer, inverted dropout, Adam, and the restarting cosine learning-rate
schedule. All parameters are float64 Tensors initialized from a caller-owned
numpy Generator so runs are bitwise reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, layer_norm

NEG_INF = -1e30  # additive mask value; large enough to zero out softmax mass


def gaussian(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear:
    """y = x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float = 0.02):
        self.d_in = d_in
        self.d_out = d_out
        self.W = gaussian(rng, (d_in, d_out), std)
        self.b = gaussian(rng, (d_out,), std)

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        return x @ self.W + self.b

    def named_params(self, prefix: str = ""):
        return [(prefix + "W", self.W), (prefix + "b", self.b)]


class LayerNorm:
    """Last-axis layer normalization with learnable scale and shift."""

    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(as_tensor(x)) * self.gamma + self.beta

    def named_params(self, prefix: str = ""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]


def causal_mask(n: int) -> np.ndarray:
    """Additive (n, n) mask: row i may only attend to columns <= i."""
    return np.triu(np.full((n, n), NEG_INF), k=1)


class MultiHeadAttention:
    """Scaled dot-product attention with `num_heads` heads.

    Query rows have dimension d_query, key/value rows d_kv; all heads
    together project into d_model and the output projects back to d_query.
    Accepts inputs of shape (..., L, d); leading axes are treated as batch.
    """

    def __init__(self, num_heads: int, d_query: int, d_kv: int, d_model: int,
                 rng: np.random.Generator, std: float = 0.02):
        if d_model % num_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.d_query = d_query
        self.d_kv = d_kv
        self.d_model = d_model
        self.d_head = d_model // num_heads
        self.W_q = gaussian(rng, (d_query, d_model), std)
        self.b_q = gaussian(rng, (d_model,), std)
        self.W_k = gaussian(rng, (d_kv, d_model), std)
        self.b_k = gaussian(rng, (d_model,), std)
        self.W_v = gaussian(rng, (d_kv, d_model), std)
        self.b_v = gaussian(rng, (d_model,), std)
        self.W_o = gaussian(rng, (d_model, d_query), std)
        self.b_o = gaussian(rng, (d_query,), std)

    def _split(self, x: Tensor):
        # (..., L, d_model) -> (..., H, L, d_head)
        new_shape = x.shape[:-1] + (self.num_heads, self.d_head)
        return x.reshape(new_shape).swapaxes(-3, -2)

    def __call__(self, query: Tensor, key_value: Tensor,
                 causal: bool = False) -> Tensor:
        query = as_tensor(query)
        key_value = as_tensor(key_value)
        if query.shape[-1] != self.d_query:
            raise ShapeError(f"query dim {query.shape} != {self.d_query}")
        if key_value.shape[-1] != self.d_kv:
            raise ShapeError(f"key/value dim {key_value.shape} != {self.d_kv}")

        q = self._split(query @ self.W_q + self.b_q)
        k = self._split(key_value @ self.W_k + self.b_k)
        v = self._split(key_value @ self.W_v + self.b_v)

        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_head))
        if causal:
            lq = query.shape[-2]
            lkv = key_value.shape[-2]
            if lq != lkv:
                raise ShapeError("causal attention requires L_q == L_kv")
            scores = scores + Tensor(causal_mask(lq))
        attn = scores.softmax(axis=-1)
        heads = attn @ v  # (..., H, L_q, d_head)
        merged = heads.swapaxes(-3, -2).reshape(
            query.shape[:-1] + (self.d_model,))
        return merged @ self.W_o + self.b_o

    def named_params(self, prefix: str = ""):
        return [(prefix + name, getattr(self, name))
                for name in ("W_q", "b_q", "W_k", "b_k", "W_v", "b_v",
                             "W_o", "b_o")]


class EncoderLayer:
    """Post-norm Transformer-encoder layer: self-attention + GELU feed-forward,
    each wrapped in a residual connection followed by layer normalization.
    Input and output feature dimension are equal."""

    def __init__(self, d_model: int, num_heads: int, d_ff: int,
                 rng: np.random.Generator, std: float = 0.02):
        self.d_model = d_model
        self.attn = MultiHeadAttention(num_heads, d_model, d_model, d_model,
                                       rng, std)
        self.ff1 = Linear(d_model, d_ff, rng, std)
        self.ff2 = Linear(d_ff, d_model, rng, std)
        self.ln1 = LayerNorm(d_model)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"encoder layer dim {self.d_model}, got {x.shape}")
        h = self.ln1(x + self.attn(x, x, causal=causal))
        return self.ln2(h + self.ff2(self.ff1(h).gelu()))

    def named_params(self, prefix: str = ""):
        out = self.attn.named_params(prefix + "attn.")
        out += self.ff1.named_params(prefix + "ff1.")
        out += self.ff2.named_params(prefix + "ff2.")
        out += self.ln1.named_params(prefix + "ln1.")
        out += self.ln2.named_params(prefix + "ln2.")
        return out


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return as_tensor(x)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return as_tensor(x) * Tensor(keep)


def cosine_lr(epoch: int, period: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine annealing from lr_max to lr_min, restarting every `period`."""
    if period <= 0:
        raise ValueError("period must be positive")
    t = epoch % period
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError("gradient shape mismatch")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / (1.0 - b1 ** self.t)
            v_hat = self.v[i] / (1.0 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
