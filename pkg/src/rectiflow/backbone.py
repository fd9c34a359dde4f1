"""Shared time-conditioned backbone f(x, t) and its checkpoint container.

Three presets share one call signature ``model(x, t)`` with ``t`` a per-sample
vector in [0, 1]:

* ``paper_unet`` -- 32x32x1 U-Net, channels (64, 128, 256), attention at 16x16
* ``tiny_unet``  -- same topology at a fraction of the width
* ``toy_mlp``    -- residual MLP on 2D points
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DomainError, IntegrityError, ShapeError

TIME_SCALE = 1000.0
CKPT_FORMAT = "rectiflow-ckpt/1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "tiny_unet"
    in_shape: tuple = (1, 32, 32)
    channel_multipliers: tuple = (16, 32, 64)
    attention_resolutions: tuple = (16,)
    time_embed_dim: int = 64
    groups: int = 8
    seed: int = 0
    num_res_blocks: int = 1
    mid_blocks: int = 0
    hidden: int = 0  # width of the toy MLP / time MLP (0 = 2 * time_embed_dim)
    depth: int = 2  # residual blocks in the toy MLP

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("in_shape", "channel_multipliers", "attention_resolutions"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        for key in ("in_shape", "channel_multipliers", "attention_resolutions"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)

    def with_seed(self, seed: int) -> "BackboneConfig":
        return replace(self, seed=seed)

    @property
    def time_hidden(self) -> int:
        return self.hidden or 2 * self.time_embed_dim


PRESETS = {
    "paper_unet": BackboneConfig(
        preset="paper_unet", in_shape=(1, 32, 32), channel_multipliers=(64, 128, 256),
        attention_resolutions=(16,), time_embed_dim=128, groups=8, num_res_blocks=1),
    "tiny_unet": BackboneConfig(
        preset="tiny_unet", in_shape=(1, 32, 32), channel_multipliers=(16, 32, 64),
        attention_resolutions=(16,), time_embed_dim=32, groups=8, num_res_blocks=1, hidden=32),
    "toy_mlp": BackboneConfig(
        preset="toy_mlp", in_shape=(2,), channel_multipliers=(), attention_resolutions=(),
        time_embed_dim=32, groups=1, hidden=64, depth=2),
}


def preset_config(name: str, seed: int = 0, **overrides) -> BackboneConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], seed=seed, **overrides)


@functools.lru_cache(maxsize=None)
def _frequencies(half: int) -> torch.Tensor:
    if half == 1:
        return torch.ones(1, dtype=torch.float64)
    return torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))


def sinusoidal_embedding(t, dim: int) -> torch.Tensor:
    """Sin/cos features of ``1000 * t``; scalar t gives a (dim,) vector, vector t gives (B, dim)."""
    if dim <= 0 or dim % 2:
        raise ConfigError(f"embedding dimension must be even and positive, got {dim}")
    tt = torch.as_tensor(t)
    if not tt.is_floating_point():
        tt = tt.to(torch.float32)
    args = TIME_SCALE * tt.to(torch.float64)[..., None] * _frequencies(dim // 2)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(tt.dtype)


# building blocks ----------------------------------------------------------------

class TimeEmbedding(nn.Module):
    def __init__(self, embed_dim: int, hidden: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.lin1 = nn.Linear(embed_dim, hidden)
        self.lin2 = nn.Linear(hidden, hidden)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.embed_dim).to(self.lin1.weight.dtype)
        return self.lin2(F.silu(self.lin1(emb)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class TimeUNet(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        cin, size, _ = config.in_shape
        chans = list(config.channel_multipliers)
        tdim = config.time_hidden
        g = config.groups
        self.time_embed = TimeEmbedding(config.time_embed_dim, tdim)
        self.stem = nn.Conv2d(cin, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        skip_chans = []
        ch, res = chans[0], size
        for level, width in enumerate(chans):
            stage = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                stage.append(ResBlock(ch, width, tdim, g))
                ch = width
                if res in config.attention_resolutions:
                    stage.append(AttentionBlock(ch, g))
            skip_chans.append(ch)
            if level < len(chans) - 1:
                stage.append(Downsample(ch))
                res //= 2
            self.down.append(stage)

        self.mid = nn.ModuleList(ResBlock(ch, ch, tdim, g) for _ in range(config.mid_blocks))

        self.up = nn.ModuleList()
        for level in reversed(range(len(chans))):
            width = chans[level]
            stage = nn.ModuleList()
            stage.append(ResBlock(ch + skip_chans[level], width, tdim, g))
            ch = width
            for _ in range(config.num_res_blocks - 1):
                stage.append(ResBlock(ch, width, tdim, g))
            if res in config.attention_resolutions:
                stage.append(AttentionBlock(ch, g))
            if level > 0:
                stage.append(Upsample(ch, chans[level - 1]))
                ch = chans[level - 1]
                res *= 2
            self.up.append(stage)

        self.out_norm = nn.GroupNorm(min(g, ch), ch)
        self.out = nn.Conv2d(ch, cin, 3, padding=1)

    @staticmethod
    def _run(stage, h, temb):
        for layer in stage:
            h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
        return h

    def forward(self, x, t):
        temb = self.time_embed(t)
        h = self.stem(x)
        skips = []
        for stage in self.down:
            for layer in stage:
                if isinstance(layer, Downsample):
                    skips.append(h)
                h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
        skips.append(h)
        for block in self.mid:
            h = block(h, temb)
        for stage in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            h = self._run(stage, h, temb)
        return self.out(F.silu(self.out_norm(h)))


class MLPBlock(nn.Module):
    def __init__(self, width: int, tdim: int):
        super().__init__()
        self.lin1 = nn.Linear(width, width)
        self.time_proj = nn.Linear(tdim, width)
        self.lin2 = nn.Linear(width, width)

    def forward(self, h, temb):
        z = self.lin1(F.silu(h)) + self.time_proj(F.silu(temb))
        return h + self.lin2(F.silu(z))


class TimeMLP(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        width = config.hidden or 64
        dim = int(np.prod(config.in_shape))
        self.time_embed = TimeEmbedding(config.time_embed_dim, width)
        self.inp = nn.Linear(dim, width)
        self.blocks = nn.ModuleList(MLPBlock(width, width) for _ in range(config.depth))
        self.out = nn.Linear(width, dim)

    def forward(self, x, t):
        temb = self.time_embed(t)
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, temb)
        return self.out(F.silu(h))


def _validate(config: BackboneConfig) -> None:
    if config.preset == "toy_mlp":
        if len(config.in_shape) != 1:
            raise ConfigError("toy_mlp expects a flat input shape such as (2,)")
        if config.attention_resolutions:
            raise ConfigError("toy_mlp has no attention")
    elif config.preset in ("paper_unet", "tiny_unet"):
        if len(config.in_shape) != 3:
            raise ConfigError("U-Net presets expect an input shape (C, H, W)")
        _, h, w = config.in_shape
        levels = len(config.channel_multipliers)
        if h != w or levels == 0 or h % (2 ** (levels - 1)):
            raise ConfigError(f"input {config.in_shape} incompatible with {levels} resolution levels")
    else:
        raise ConfigError(f"unknown preset {config.preset!r}")
    if config.time_embed_dim % 2:
        raise ConfigError("time_embed_dim must be even")


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, zero final layer."""
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv2d)):
            fan_in = module.weight[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                module.weight.copy_(
                    (torch.rand(module.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                if module.bias is not None:
                    module.bias.zero_()
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.zero_()


def randomize_output_layer(model: nn.Module, seed: int, scale: float = 1.0) -> nn.Module:
    """Give the (normally zero) output layer random weights; used by diagnostics."""
    gen = torch.Generator().manual_seed(int(seed))
    w = model.out.weight
    bound = scale * math.sqrt(3.0 / w[0].numel())
    with torch.no_grad():
        w.copy_((torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return model


def build(config: BackboneConfig, dtype=torch.float32, device=None) -> nn.Module:
    _validate(config)
    if device == "meta":
        with torch.device("meta"):
            return TimeMLP(config) if config.preset == "toy_mlp" else TimeUNet(config)
    model = TimeMLP(config) if config.preset == "toy_mlp" else TimeUNet(config)
    init_parameters(model, config.seed)
    return model.to(dtype)


def param_count(config: BackboneConfig) -> int:
    return sum(p.numel() for p in build(config, device="meta").parameters())


def _time_vector(t, batch: int, dtype) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=dtype)
    if tt.ndim == 0:
        return tt.expand(batch).clone()
    if tt.shape != (batch,):
        raise ShapeError(f"time vector shape {tuple(tt.shape)} does not match batch {batch}")
    return tt


def forward(model: nn.Module, x: torch.Tensor, t) -> torch.Tensor:
    """Checked call of the backbone: shape and finiteness of the input are enforced."""
    expected = tuple(model.config.in_shape)
    if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"expected input (batch, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
    if torch.isnan(x).any():
        raise DomainError("NaN in backbone input")
    return model(x, _time_vector(t, x.shape[0], x.dtype))


# checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: BackboneConfig
    params: dict  # name -> float32 ndarray
    manifest: dict  # name -> (shape, offset, nbytes)
    paradigm: str = "flow"
    train_meta: dict = field(default_factory=dict)
    schedule: Optional[dict] = None

    def model(self, dtype=torch.float32) -> nn.Module:
        model = build(self.config, dtype=dtype)
        state = model.state_dict()
        missing = set(state) ^ set(self.params)
        if missing:
            raise IntegrityError(f"checkpoint/model parameter mismatch: {sorted(missing)}",
                                 entry=sorted(missing)[0])
        for name, arr in self.params.items():
            if tuple(state[name].shape) != arr.shape:
                raise IntegrityError(f"shape mismatch for {name}", entry=name)
            state[name] = torch.from_numpy(arr.copy()).to(dtype)
        model.load_state_dict(state)
        model.eval()
        return model

    def param_count(self) -> int:
        return sum(a.size for a in self.params.values())


def checkpoint_from_model(model: nn.Module, paradigm: str = "flow", train_meta: Optional[dict] = None,
                          schedule: Optional[dict] = None) -> Checkpoint:
    params, manifest, offset = {}, {}, 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().copy()
        params[name] = arr
        manifest[name] = (list(arr.shape), offset, arr.nbytes)
        offset += arr.nbytes
    return Checkpoint(model.config, params, manifest, paradigm, dict(train_meta or {}), schedule)


def save(obj, path, paradigm: str = "flow", train_meta: Optional[dict] = None,
         schedule: Optional[dict] = None) -> Checkpoint:
    """Write ``manifest.json`` plus a little-endian float32 ``params.bin`` into directory ``path``."""
    ckpt = obj if isinstance(obj, Checkpoint) else checkpoint_from_model(obj, paradigm, train_meta, schedule)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    offset = 0
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CKPT_FORMAT,
        "config": ckpt.config.to_dict(),
        "paradigm": ckpt.paradigm,
        "train_meta": ckpt.train_meta,
        "schedule": ckpt.schedule,
        "blob": BLOB_NAME,
        "blob_bytes": offset,
        "entries": entries,
    }
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return ckpt


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CKPT_FORMAT:
        raise IntegrityError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (path / manifest.get("blob", BLOB_NAME)).read_bytes()
    if len(blob) != manifest.get("blob_bytes"):
        raise IntegrityError(
            f"parameter blob is {len(blob)} bytes, manifest declares {manifest.get('blob_bytes')}",
            entry=manifest["entries"][-1]["name"] if manifest.get("entries") else None)
    spans = sorted(manifest["entries"], key=lambda e: e["offset"])
    cursor = 0
    params, table = {}, {}
    for entry in spans:
        name, shape, offset, nbytes = entry["name"], entry["shape"], entry["offset"], entry["nbytes"]
        if offset != cursor:
            raise IntegrityError(f"entry {name!r} starts at {offset}, expected {cursor} "
                                 "(spans must be disjoint and contiguous)", entry=name)
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise IntegrityError(f"entry {name!r} byte length does not match its shape", entry=name)
        if offset + nbytes > len(blob):
            raise IntegrityError(f"entry {name!r} extends past the end of the blob", entry=name)
        params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset) \
            .astype(np.float32).reshape(shape)
        table[name] = (list(shape), offset, nbytes)
        cursor = offset + nbytes
    if cursor != len(blob):
        raise IntegrityError(f"{len(blob) - cursor} trailing bytes not covered by any entry",
                             entry=spans[-1]["name"] if spans else None)
    # restore declaration order
    order = [e["name"] for e in manifest["entries"]]
    params = {name: params[name] for name in order}
    return Checkpoint(BackboneConfig.from_dict(manifest["config"]), params, table,
                      manifest.get("paradigm", "flow"), manifest.get("train_meta") or {},
                      manifest.get("schedule"))


def load_model(path, dtype=torch.float32) -> tuple[nn.Module, Checkpoint]:
    ckpt = load(path)
    return ckpt.model(dtype), ckpt


def same_architecture(a: BackboneConfig, b: BackboneConfig) -> bool:
    return replace(a, seed=0) == replace(b, seed=0)


def flops_per_forward(config: BackboneConfig) -> int:
    """Multiply-add count of one single-sample forward pass (linear, conv and attention matmuls)."""
    model = build(config)
    total = 0

    def count(module, inputs, output):
        nonlocal total
        if isinstance(module, nn.Linear):
            total += module.in_features * module.out_features * (output.numel() // module.out_features)
        elif isinstance(module, nn.Conv2d):
            k = module.kernel_size[0] * module.kernel_size[1]
            total += output.numel() * (module.in_channels // module.groups) * k
        elif isinstance(module, AttentionBlock):
            _, c, h, w = inputs[0].shape
            total += 2 * (h * w) ** 2 * c

    hooks = [m.register_forward_hook(count) for m in model.modules()
             if isinstance(m, (nn.Linear, nn.Conv2d, AttentionBlock))]
    try:
        with torch.no_grad():
            model(torch.zeros(1, *config.in_shape), torch.zeros(1))
    finally:
        for h in hooks:
            h.remove()
    return int(total)
