"""The dual-token block: convolutional local branch, step-wise downsampling,
global aggregation, fusion with the position-aware global token grid, global
broadcast, FFN, and the gated bi-dimensional attention, plus the ablation
variants (window self-attention local branch, normal 1-d global tokens,
one-step downsampling)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, MultiHeadAttention, prefixed
from .tensor import Tensor


@dataclass
class BlockConfig:
    channels: int
    heads: int
    dw_kernel: int | None = 5
    token_grid: int = 7
    alpha: float = 0.1
    mlp_kind: str = "normal"          # normal | mix
    local_kind: str = "conv_encoder"  # conv_encoder | window_msa
    ds_kind: str = "step_wise"        # step_wise | one_step
    global_mode: str = "position_aware_sum"  # position_aware_sum | normal_msa | position_aware_msa
    ffn_ratio: int = 4
    bidim: bool = True
    window: int = 7
    num_global_tokens: int = 8        # token count for normal_msa mode
    skip_local_and_ds: bool = False
    resolution: int = 28              # stage feature-map side the block is built for

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.local_kind == "window_msa" and not self.skip_local_and_ds:
            if self.resolution % self.window != 0:
                raise ValueError(
                    f"window_msa needs the feature map side ({self.resolution}) "
                    f"divisible by the window ({self.window})")

    @property
    def global_token_count(self):
        if self.global_mode == "normal_msa":
            return self.num_global_tokens
        return self.token_grid * self.token_grid


@dataclass
class GlobalTokens:
    """The auxiliary token set threaded across blocks; position-aware tokens
    keep a g x g grid arrangement, normal tokens are a flat list."""
    tokens: Tensor  # n x C
    grid_side: int | None

    @property
    def count(self):
        return self.tokens.shape[0]

    @property
    def channels(self):
        return self.tokens.shape[1]


@dataclass
class BlockActivations:
    x_local: Tensor
    x_ds: Tensor
    x_ga: Tensor
    g_new: Tensor
    x_global: Tensor
    x_new: Tensor
    broadcast_attention: np.ndarray  # N x n_g, post-softmax, head-averaged
    used_interpolation: bool = False
    label: str = ""


def ds_plan(resolution, grid, n_convs):
    """Pooling/conv schedule of the step-wise downsampler.

    Returns (conv_input_sizes, final_size): one avgpool first, then up to
    n_convs repetitions of conv-then-avgpool while halving stays on or above
    the grid. A final_size != grid means the bilinear fallback kicks in.
    """
    sizes = []
    cur = resolution
    first = True
    while cur > grid and cur % 2 == 0 and cur // 2 >= grid:
        if not first:
            if len(sizes) >= n_convs:
                break
            sizes.append(cur)
        cur //= 2
        first = False
    return sizes, cur


def ds_conv_count(resolution, grid):
    """Number of 3x3 convs the step-wise downsampler needs for a stage."""
    sizes, _ = ds_plan(resolution, grid, 10**9)
    return len(sizes)


class ConvEncoder:
    """Residual depthwise/pointwise convolution block:
    x + PW2(GELU(PW1(LN(DW(x)))))."""

    def __init__(self, dw_w, dw_b, ln, pw1_w, pw1_b, pw2_w, pw2_b):
        self.dw_w, self.dw_b = dw_w, dw_b
        self.ln = ln
        self.pw1_w, self.pw1_b = pw1_w, pw1_b
        self.pw2_w, self.pw2_b = pw2_w, pw2_b

    @classmethod
    def build(cls, rng, channels, kernel, expansion=4):
        from .layers import _init_from
        c, e = channels, channels * expansion
        dw_w = _init_from(rng, (kernel, kernel, 1, c), "trunc_normal")
        dw_b = _init_from(rng, (c,), "zeros")
        ln = LayerNorm.build(rng, c)
        pw1_w = _init_from(rng, (1, 1, c, e), "trunc_normal")
        pw1_b = _init_from(rng, (e,), "zeros")
        pw2_w = _init_from(rng, (1, 1, e, c), "trunc_normal")
        pw2_b = _init_from(rng, (c,), "zeros")
        return cls(dw_w, dw_b, ln, pw1_w, pw1_b, pw2_w, pw2_b)

    def __call__(self, x):
        c = x.shape[-1]
        y = T.conv2d(x, self.dw_w, self.dw_b, padding="same", groups=c)
        y = self.ln(y)
        y = T.conv2d(y, self.pw1_w, self.pw1_b)
        y = T.gelu(y)
        y = T.conv2d(y, self.pw2_w, self.pw2_b)
        return T.add(x, y)

    def named_params(self):
        yield "dw.weight", self.dw_w
        yield "dw.bias", self.dw_b
        yield from prefixed("norm", self.ln.named_params())
        yield "pw1.weight", self.pw1_w
        yield "pw1.bias", self.pw1_b
        yield "pw2.weight", self.pw2_w
        yield "pw2.bias", self.pw2_b


class WindowAttentionLocal:
    """Multi-head self-attention inside non-overlapping windows, plus the
    residual; the ablation alternative to the conv encoder."""

    def __init__(self, attn, window):
        self.attn = attn
        self.window = window

    @classmethod
    def build(cls, rng, channels, heads, window=7):
        return cls(MultiHeadAttention.build(rng, channels, heads), window)

    def __call__(self, x):
        h, w, c = x.shape
        win = self.window
        if h % win or w % win:
            raise ValueError(f"feature map {h}x{w} not divisible by window {win}")
        row_tensors = []
        for wi in range(h // win):
            rows = T.slice_axis(x, 0, wi * win, (wi + 1) * win)
            col_outs = []
            for wj in range(w // win):
                block = T.slice_axis(rows, 1, wj * win, (wj + 1) * win)
                tokens = T.reshape(block, (win * win, c))
                out = T.add(tokens, self.attn(tokens))
                col_outs.append(T.reshape(out, (win, win, c)))
            row_tensors.append(T.concat(col_outs, axis=1))
        return T.concat(row_tensors, axis=0)

    def named_params(self):
        yield from prefixed("attn", self.attn.named_params())


class Downsampler:
    """Reduce the local feature map to the g x g aggregation grid.

    kind 'step_wise': one avgpool, then conv+avgpool repetitions; 'one_step':
    a single pooling; 'skip': identity. Whenever the result misses the grid,
    bilinear resampling makes up the difference.
    """

    def __init__(self, kind, grid, convs):
        self.kind = kind
        self.grid = grid
        self.convs = convs  # list of (weight, bias) 3x3 same-padding convs

    @classmethod
    def build(cls, rng, channels, kind, grid, resolution):
        from .layers import _init_from
        convs = []
        if kind == "step_wise":
            for _ in range(ds_conv_count(resolution, grid)):
                w = _init_from(rng, (3, 3, channels, channels), "trunc_normal")
                b = _init_from(rng, (channels,), "zeros")
                convs.append((w, b))
        return cls(kind, grid, convs)

    def __call__(self, x):
        g = self.grid
        y = x
        if self.kind == "one_step":
            h = y.shape[0]
            if h > g and h % g == 0:
                y = T.avgpool2d(y, h // g)
        elif self.kind == "step_wise":
            ci = 0
            first = True
            while y.shape[0] > g and y.shape[0] % 2 == 0 and y.shape[0] // 2 >= g:
                if not first:
                    if ci >= len(self.convs):
                        break
                    w, b = self.convs[ci]
                    y = T.conv2d(y, w, b, padding="same")
                    ci += 1
                y = T.avgpool2d(y, 2)
                first = False
        used_interp = y.shape[0] != g or y.shape[1] != g
        if used_interp:
            y = T.bilinear_resize(y, g, g)
        return y, used_interp

    def named_params(self):
        for i, (w, b) in enumerate(self.convs):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b


class TokenMLP:
    """MLP on global tokens: channel-only (Linear-GELU-Linear, hidden = C) or
    the token-mixing variant (channel linear, transpose, token linear)."""

    def __init__(self, kind, lin1, lin2):
        self.kind = kind
        self.lin1 = lin1
        self.lin2 = lin2

    @classmethod
    def build(cls, rng, channels, kind, n_tokens):
        if kind == "normal":
            return cls(kind, Linear.build(rng, channels, channels),
                       Linear.build(rng, channels, channels))
        if kind == "mix":
            return cls(kind, Linear.build(rng, channels, channels),
                       Linear.build(rng, n_tokens, n_tokens))
        raise ValueError(f"unknown token MLP kind {kind!r}")

    def __call__(self, g):
        if self.kind == "normal":
            return self.lin2(T.gelu(self.lin1(g)))
        if g.shape[0] != self.lin2.cin:
            raise ValueError(
                f"mix MLP is bound to {self.lin2.cin} tokens, got {g.shape[0]}")
        y = T.transpose(self.lin1(g))      # C x n
        y = self.lin2(y)                   # token-axis linear
        return T.transpose(y)

    def named_params(self):
        yield from prefixed("lin1", self.lin1.named_params())
        yield from prefixed("lin2", self.lin2.named_params())


class FFN:
    """Pre-norm residual feed-forward on flattened tokens."""

    def __init__(self, ln, lin1, lin2):
        self.ln = ln
        self.lin1 = lin1
        self.lin2 = lin2

    @classmethod
    def build(cls, rng, channels, ratio=4):
        hidden = channels * ratio
        return cls(LayerNorm.build(rng, channels),
                   Linear.build(rng, channels, hidden),
                   Linear.build(rng, hidden, channels))

    def __call__(self, x):
        y = self.lin2(T.gelu(self.lin1(self.ln(x))))
        return T.add(x, y)

    def named_params(self):
        yield from prefixed("norm", self.ln.named_params())
        yield from prefixed("lin1", self.lin1.named_params())
        yield from prefixed("lin2", self.lin2.named_params())


class BiDimAttention:
    """Gated spatial x channel reweighting with a residual:
    x + x * sigmoid(spatial gate) * sigmoid(channel gate)."""

    def __init__(self, spatial_gate, channel_gate):
        self.spatial_gate = spatial_gate  # Linear C -> 1
        self.channel_gate = channel_gate  # Linear C -> C on the token mean

    @classmethod
    def build(cls, rng, channels):
        return cls(Linear.build(rng, channels, 1),
                   Linear.build(rng, channels, channels))

    def __call__(self, x):
        s = T.sigmoid(self.spatial_gate(x))                      # N x 1
        pooled = T.mean(x, axis=0, keepdims=True)                # 1 x C
        c = T.sigmoid(self.channel_gate(pooled))                 # 1 x C
        return T.add(x, T.mul(T.mul(x, s), c))

    def named_params(self):
        yield from prefixed("spatial", self.spatial_gate.named_params())
        yield from prefixed("channel", self.channel_gate.named_params())


class DualTokenBlock:
    """One block: local branch, token module (downsample, aggregate, fuse,
    broadcast), dual-token fusion, FFN, bi-dimensional attention, and the
    residual global-token update."""

    def __init__(self, cfg, local, ds, aggregate, fuse_norm, fuse_mlp,
                 fuse_attn, broadcast, ffn, bidim):
        self.cfg = cfg
        self.local = local
        self.ds = ds
        self.aggregate = aggregate
        self.fuse_norm = fuse_norm
        self.fuse_mlp = fuse_mlp
        self.fuse_attn = fuse_attn
        self.broadcast = broadcast
        self.ffn = ffn
        self.bidim = bidim

    @classmethod
    def build(cls, rng, cfg):
        c, h = cfg.channels, cfg.heads
        if cfg.skip_local_and_ds:
            local = None
            ds = Downsampler("skip", cfg.token_grid, [])
        else:
            if cfg.local_kind == "conv_encoder":
                local = ConvEncoder.build(rng, c, cfg.dw_kernel)
            elif cfg.local_kind == "window_msa":
                local = WindowAttentionLocal.build(rng, c, h, cfg.window)
            else:
                raise ValueError(f"unknown local kind {cfg.local_kind!r}")
            ds = Downsampler.build(rng, c, cfg.ds_kind, cfg.token_grid, cfg.resolution)
        aggregate = MultiHeadAttention.build(rng, c, h)
        fuse_norm = fuse_mlp = fuse_attn = None
        if cfg.global_mode == "position_aware_sum":
            fuse_norm = LayerNorm.build(rng, c)
            fuse_mlp = TokenMLP.build(rng, c, cfg.mlp_kind, cfg.token_grid ** 2)
        elif cfg.global_mode in ("normal_msa", "position_aware_msa"):
            fuse_attn = MultiHeadAttention.build(rng, c, h)
        else:
            raise ValueError(f"unknown global mode {cfg.global_mode!r}")
        broadcast = MultiHeadAttention.build(rng, c, h)
        ffn = FFN.build(rng, c, cfg.ffn_ratio)
        bidim = BiDimAttention.build(rng, c) if cfg.bidim else None
        return cls(cfg, local, ds, aggregate, fuse_norm, fuse_mlp, fuse_attn,
                   broadcast, ffn, bidim)

    # individual pipeline pieces, exposed for direct testing ----------------

    def local_branch(self, x):
        return x if self.local is None else self.local(x)

    def downsample(self, x_local):
        return self.ds(x_local)

    def global_aggregate(self, x_ds_tokens):
        return self.aggregate(x_ds_tokens)

    def fuse_global_tokens(self, g_tokens, x_ga):
        cfg = self.cfg
        if cfg.global_mode == "position_aware_sum":
            if g_tokens.shape[0] != x_ga.shape[0]:
                raise ValueError(
                    f"token counts disagree: G has {g_tokens.shape[0]}, "
                    f"aggregated map has {x_ga.shape[0]}")
            mlp_path = self.fuse_mlp(self.fuse_norm(g_tokens))
            return T.add(T.scale(mlp_path, cfg.alpha),
                         T.scale(x_ga, 1.0 - cfg.alpha))
        kv = T.concat([g_tokens, x_ga], axis=0)
        return self.fuse_attn(g_tokens, kv)

    def global_broadcast(self, image_tokens, g_new):
        return self.broadcast(image_tokens, g_new, need_weights=True)

    # full pipeline ---------------------------------------------------------

    def __call__(self, x, g: GlobalTokens, label=""):
        h, w, c = x.shape
        x_local = self.local_branch(x)
        x_ds, used_interp = self.downsample(x_local)
        grid = self.cfg.token_grid
        x_ds_tokens = T.reshape(x_ds, (grid * grid, c))
        x_ga = self.global_aggregate(x_ds_tokens)
        g_new = self.fuse_global_tokens(g.tokens, x_ga)
        x_local_tokens = T.reshape(x_local, (h * w, c))
        x_global, attn = self.global_broadcast(x_local_tokens, g_new)
        x_new = T.add(x_local_tokens, x_global)
        y = self.ffn(x_new)
        if self.bidim is not None:
            y = self.bidim(y)
        x_out = T.reshape(y, (h, w, c))
        g_out = GlobalTokens(T.add(g.tokens, g_new), g.grid_side)
        acts = BlockActivations(
            x_local=x_local, x_ds=x_ds, x_ga=x_ga, g_new=g_new,
            x_global=x_global, x_new=x_new, broadcast_attention=attn,
            used_interpolation=used_interp, label=label)
        return x_out, g_out, acts

    def named_params(self):
        if self.local is not None:
            kind = "conv_encoder" if isinstance(self.local, ConvEncoder) else "window_local"
            yield from prefixed(kind, self.local.named_params())
        yield from prefixed("downsample", self.ds.named_params())
        yield from prefixed("aggregate", self.aggregate.named_params())
        if self.fuse_norm is not None:
            yield from prefixed("fuse.norm", self.fuse_norm.named_params())
        if self.fuse_mlp is not None:
            yield from prefixed("fuse.mlp", self.fuse_mlp.named_params())
        if self.fuse_attn is not None:
            yield from prefixed("fuse.attn", self.fuse_attn.named_params())
        yield from prefixed("broadcast", self.broadcast.named_params())
        yield from prefixed("ffn", self.ffn.named_params())
        if self.bidim is not None:
            yield from prefixed("bidim", self.bidim.named_params())


def dual_token_fusion(x_local, x_global):
    """Elementwise sum of the local and global token maps."""
    if x_local.shape != x_global.shape:
        raise ValueError(f"shape mismatch: {x_local.shape} vs {x_global.shape}")
    return T.add(x_local, x_global)
