"""Full model assembly: stem, three stages of dual-token blocks, merge-patch
transitions, global-token propagation, classifier head, presets, and
checkpoint / config serialization."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .block import BlockConfig, DualTokenBlock, GlobalTokens
from .layers import LayerNorm, Linear, _init_from, prefixed
from .tensor import GradTape, Tensor


@dataclass
class StageConfig:
    blocks: int
    channels: int
    heads: int
    dw_kernel: int | None = None  # None on the stage that skips the local branch

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {"blocks", "channels", "heads", "dw_kernel"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown StageConfig fields: {sorted(unknown)}")
        return cls(**d)


STRIDES = (8, 16, 32)


@dataclass
class ModelConfig:
    name: str = "custom"
    stages: list = field(default_factory=list)  # exactly 3 StageConfigs
    token_grid: int = 7
    alpha: float = 0.1
    mlp_kind: str = "normal"
    local_kind: str = "conv_encoder"
    ds_kind: str = "step_wise"
    global_mode: str = "position_aware_sum"
    ffn_ratio: int = 4
    bidim: bool = True
    window: int = 7
    num_global_tokens: int = 8
    num_classes: int = 1000
    input_resolution: int = 224
    head_hidden: int = 1280

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig.from_dict(s)
                       for s in self.stages]
        if len(self.stages) != 3:
            raise ValueError(f"expected exactly 3 stages, got {len(self.stages)}")
        if self.input_resolution % 32 != 0:
            # stride-8 stem plus two 2x2 merges need five halvings in total
            raise ValueError("input resolution must be divisible by 32")
        for s in self.stages:
            if s.channels % s.heads != 0:
                raise ValueError(
                    f"channels {s.channels} not divisible by heads {s.heads}")

    def stage_resolution(self, i):
        return self.input_resolution // STRIDES[i]

    def block_config(self, stage_index):
        s = self.stages[stage_index]
        return BlockConfig(
            channels=s.channels, heads=s.heads, dw_kernel=s.dw_kernel,
            token_grid=self.token_grid, alpha=self.alpha,
            mlp_kind=self.mlp_kind, local_kind=self.local_kind,
            ds_kind=self.ds_kind, global_mode=self.global_mode,
            ffn_ratio=self.ffn_ratio, bidim=self.bidim, window=self.window,
            num_global_tokens=self.num_global_tokens,
            skip_local_and_ds=(stage_index == 2),
            resolution=self.stage_resolution(stage_index))

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [s.to_dict() for s in self.stages]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def preset(name):
    """Named architecture configurations (Tiny/Small plus toy test scales)."""
    if name in ("dualtoken_t", "dualtoken_t_mix"):
        cfg = ModelConfig(
            name=name,
            stages=[StageConfig(2, 48, 2, 5), StageConfig(6, 96, 4, 7),
                    StageConfig(4, 192, 8, None)],
            mlp_kind="mix" if name.endswith("_mix") else "normal")
    elif name in ("dualtoken_s", "dualtoken_s_mix"):
        cfg = ModelConfig(
            name=name,
            stages=[StageConfig(2, 64, 2, 5), StageConfig(6, 128, 4, 7),
                    StageConfig(6, 256, 8, None)],
            mlp_kind="mix" if name.endswith("_mix") else "normal")
    elif name == "toy":
        cfg = ModelConfig(
            name=name,
            stages=[StageConfig(1, 8, 2, 3), StageConfig(1, 16, 4, 3),
                    StageConfig(1, 32, 8, None)],
            token_grid=2, num_classes=8, input_resolution=32, head_hidden=64)
    elif name == "toy_grad":
        # small enough for finite-difference checking
        cfg = ModelConfig(
            name=name,
            stages=[StageConfig(1, 4, 2, 3), StageConfig(1, 4, 2, 3),
                    StageConfig(1, 4, 2, None)],
            token_grid=2, num_classes=4, input_resolution=32, head_hidden=8)
    else:
        raise ValueError(f"unknown preset {name!r}")
    return cfg


PRESET_NAMES = ("dualtoken_t", "dualtoken_t_mix", "dualtoken_s",
                "dualtoken_s_mix", "toy", "toy_grad")


class Stem:
    """Three stride-2 3x3 convolutions (3 -> C1/2 -> C1/2 -> C1) with
    LN + GELU between; total stride 8."""

    def __init__(self, convs, norms):
        self.convs = convs  # list of (weight, bias, stride)
        self.norms = norms

    @classmethod
    def build(cls, rng, out_channels):
        mid = max(out_channels // 2, 1)
        plan = [(3, mid), (mid, mid), (mid, out_channels)]
        convs = []
        norms = []
        for i, (cin, cout) in enumerate(plan):
            w = _init_from(rng, (3, 3, cin, cout), "trunc_normal")
            b = _init_from(rng, (cout,), "zeros")
            convs.append((w, b))
            if i < 2:
                norms.append(LayerNorm.build(rng, cout))
        return cls(convs, norms)

    def __call__(self, x):
        for i, (w, b) in enumerate(self.convs):
            x = T.conv2d(x, w, b, stride=2, padding=1)
            if i < 2:
                x = T.gelu(self.norms[i](x))
        return x

    def named_params(self):
        for i, (w, b) in enumerate(self.convs):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b
        for i, ln in enumerate(self.norms):
            yield from prefixed(f"norm{i}", ln.named_params())


class MergePatch:
    """2x2 neighborhood concatenation (4C channels), LN, linear to the next
    stage's width."""

    def __init__(self, ln, proj):
        self.ln = ln
        self.proj = proj

    @classmethod
    def build(cls, rng, cin, cout):
        return cls(LayerNorm.build(rng, 4 * cin), Linear.build(rng, 4 * cin, cout))

    def __call__(self, x):
        h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"merge_patch needs even extents, got {h}x{w}")
        y = T.reshape(x, (h // 2, 2, w // 2, 2, c))
        y = T.transpose(y, (0, 2, 1, 3, 4))
        y = T.reshape(y, (h // 2 * (w // 2), 4 * c))
        y = self.proj(self.ln(y))
        return T.reshape(y, (h // 2, w // 2, self.proj.cout))

    def named_params(self):
        yield from prefixed("norm", self.ln.named_params())
        yield from prefixed("proj", self.proj.named_params())


class Model:
    def __init__(self, cfg, stem, stages, merges, g_init, g_projs,
                 head_norm, head_lin1, head_lin2):
        self.cfg = cfg
        self.stem = stem
        self.stages = stages          # list of list of DualTokenBlock
        self.merges = merges
        self.g_init = g_init          # learnable initial global tokens
        self.g_projs = g_projs        # bias-free per-token linear at stage boundaries
        self.head_norm = head_norm
        self.head_lin1 = head_lin1
        self.head_lin2 = head_lin2

    def forward(self, images, want_activations=True):
        cfg = self.cfg
        s = images.shape[0]
        if images.shape[0] != images.shape[1] or images.shape[2] != 3:
            raise ValueError(f"expected a square S x S x 3 image, got {images.shape}")
        if s % 32 != 0:
            raise ValueError(f"input side {s} not divisible by 32")
        x = self.stem(images)
        grid_side = None if cfg.global_mode == "normal_msa" else cfg.token_grid
        g = GlobalTokens(self.g_init, grid_side)
        acts = []
        for si, blocks in enumerate(self.stages):
            if si > 0:
                x = self.merges[si - 1](x)
                g = GlobalTokens(self.g_projs[si - 1](g.tokens), g.grid_side)
            for bi, block in enumerate(blocks):
                x, g, a = block(x, g, label=f"stage{si + 1}.block{bi}")
                if want_activations:
                    acts.append(a)
        h, w, c = x.shape
        tokens = T.reshape(x, (h * w, c))
        pooled = T.mean(self.head_norm(tokens), axis=0, keepdims=True)
        y = T.gelu(self.head_lin1(pooled))
        logits = T.reshape(self.head_lin2(y), (cfg.num_classes,))
        return logits, acts

    def named_params(self):
        yield from prefixed("stem", self.stem.named_params())
        yield "global_tokens.init", self.g_init
        for i, proj in enumerate(self.g_projs):
            yield from prefixed(f"global_tokens.proj{i}", proj.named_params())
        for si, blocks in enumerate(self.stages):
            if si > 0:
                yield from prefixed(f"merge{si}", self.merges[si - 1].named_params())
            for bi, block in enumerate(blocks):
                yield from prefixed(f"stage{si + 1}.block{bi}", block.named_params())
        yield from prefixed("head.norm", self.head_norm.named_params())
        yield from prefixed("head.lin1", self.head_lin1.named_params())
        yield from prefixed("head.lin2", self.head_lin2.named_params())

    def param_dict(self):
        d = {}
        for name, p in self.named_params():
            if name in d:
                raise ValueError(f"duplicate parameter name {name}")
            d[name] = p
        return d

    def num_params(self):
        return sum(p.size for _, p in self.named_params())


def build_model(cfg, seed=42):
    """Deterministically initialize a model from its configuration."""
    if isinstance(cfg, str):
        cfg = preset(cfg)
    rng = np.random.default_rng(seed)
    c1 = cfg.stages[0].channels
    stem = Stem.build(rng, c1)
    n_g = cfg.num_global_tokens if cfg.global_mode == "normal_msa" else cfg.token_grid ** 2
    g_init = _init_from(rng, (n_g, c1), "trunc_normal")
    stages = []
    merges = []
    g_projs = []
    for si in range(3):
        if si > 0:
            cin = cfg.stages[si - 1].channels
            cout = cfg.stages[si].channels
            merges.append(MergePatch.build(rng, cin, cout))
            g_projs.append(Linear.build(rng, cin, cout, bias=False))
        bcfg = cfg.block_config(si)
        stages.append([DualTokenBlock.build(rng, bcfg)
                       for _ in range(cfg.stages[si].blocks)])
    c3 = cfg.stages[2].channels
    head_norm = LayerNorm.build(rng, c3)
    head_lin1 = Linear.build(rng, c3, cfg.head_hidden)
    head_lin2 = Linear.build(rng, cfg.head_hidden, cfg.num_classes)
    return Model(cfg, stem, stages, merges, g_init, g_projs,
                 head_norm, head_lin1, head_lin2)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"DTVT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


def write_tensors(path, named):
    """Write an ordered name -> ndarray mapping in the DTVT container."""
    items = list(named.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensors(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated file")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a DTVT checkpoint)")
    version, = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    count, = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        nlen, = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, = struct.unpack("<B", take(1))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        dtype = _CODE_DTYPES[code]
        rank, = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(take(size * dtype.itemsize),
                             dtype=dtype.newbyteorder("<")).astype(dtype)
        out[name] = data.reshape(dims)
    return out


def save_checkpoint(model, path):
    write_tensors(path, {n: p.data for n, p in model.named_params()})


def load_checkpoint(model, path):
    """Load parameters in place; shapes must match the model's config."""
    tensors = read_tensors(path)
    params = model.param_dict()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: "
                f"checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}")
        p.data = np.ascontiguousarray(arr.astype(p.data.dtype))
    extra = set(tensors) - set(params)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)[:3]}")
    return model
