"""Parameterized layers: linear projections, multi-head attention, and
parameter initialization."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_params(shape, scheme="trunc_normal", seed=0, std=0.02):
    """Deterministic parameter initialization.

    trunc_normal samples N(0, std^2) clipped to +-2 std; zeros/ones are what
    they say. Same (shape, scheme, seed) always yields bit-identical data.
    """
    rng = np.random.default_rng(seed)
    return _init_from(rng, shape, scheme, std)


def _init_from(rng, shape, scheme, std=0.02):
    if scheme == "zeros":
        data = np.zeros(shape, dtype=np.float32)
    elif scheme == "ones":
        data = np.ones(shape, dtype=np.float32)
    elif scheme == "trunc_normal":
        data = rng.normal(0.0, std, size=shape)
        data = np.clip(data, -2.0 * std, 2.0 * std).astype(np.float32)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True)


class Linear:
    """x @ W + b with W of shape Cin x Cout."""

    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def build(cls, rng, cin, cout, bias=True):
        w = _init_from(rng, (cin, cout), "trunc_normal")
        b = _init_from(rng, (cout,), "zeros") if bias else None
        return cls(w, b)

    @property
    def cin(self):
        return self.weight.shape[0]

    @property
    def cout(self):
        return self.weight.shape[1]

    def __call__(self, x):
        if x.shape[-1] != self.cin:
            raise ValueError(f"linear expects {self.cin} input channels, got {x.shape}")
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def named_params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class LayerNorm:
    def __init__(self, gamma, beta, eps=1e-6):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    @classmethod
    def build(cls, rng, channels, eps=1e-6):
        return cls(_init_from(rng, (channels,), "ones"),
                   _init_from(rng, (channels,), "zeros"), eps)

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


class MultiHeadAttention:
    """Scaled dot-product attention with separate Q/K/V/out projections."""

    def __init__(self, heads, q_proj, k_proj, v_proj, out_proj):
        channels = q_proj.cout
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.q_proj = q_proj
        self.k_proj = k_proj
        self.v_proj = v_proj
        self.out_proj = out_proj

    @classmethod
    def build(cls, rng, channels, heads):
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        mk = lambda: Linear.build(rng, channels, channels)
        return cls(heads, mk(), mk(), mk(), mk())

    def __call__(self, q_src, kv_src=None, need_weights=False):
        if kv_src is None:
            kv_src = q_src
        q = self.q_proj(q_src)
        k = self.k_proj(kv_src)
        v = self.v_proj(kv_src)
        d = self.head_dim
        inv_sqrt_d = 1.0 / math.sqrt(d)
        outs = []
        weights = []
        for h in range(self.heads):
            qh = T.slice_axis(q, 1, h * d, (h + 1) * d)
            kh = T.slice_axis(k, 1, h * d, (h + 1) * d)
            vh = T.slice_axis(v, 1, h * d, (h + 1) * d)
            logits = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt_d)
            attn = T.softmax(logits)
            outs.append(T.matmul(attn, vh))
            if need_weights:
                weights.append(attn.data)
        out = self.out_proj(T.concat(outs, axis=1))
        if need_weights:
            return out, np.mean(weights, axis=0)
        return out

    def named_params(self):
        for name, sub in (("q_proj", self.q_proj), ("k_proj", self.k_proj),
                          ("v_proj", self.v_proj), ("out_proj", self.out_proj)):
            for n, p in sub.named_params():
                yield f"{name}.{n}", p


def mhsa(attn, q_src, kv_src=None, need_weights=False):
    """Functional wrapper: self-attention when kv_src is omitted, cross
    otherwise."""
    return attn(q_src, kv_src, need_weights=need_weights)


def prefixed(prefix, items):
    for name, p in items:
        yield f"{prefix}.{name}", p
