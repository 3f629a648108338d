"""Windowed-attention U-Net with an HR regression head.

The encoder builds token maps hierarchically (patch embedding, windowed
multi-head self-attention with alternating cyclic shifts, patch merging);
the decoder mirrors it with patch expanding and skip concatenation and
reconstructs an image of the input's shape; a small convolutional head on
the bottleneck tokens regresses the heart rate.

Parameters live in a flat, named :class:`ParameterStore` rather than an
``nn.Module`` tree: the optimizer, freeze masks for linear probing and
the checkpoint format all address parameters by name. Forward passes are
pure functions of (image, store, config) built from torch ops, so
gradients come from reverse-mode autodiff and are verified against
finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, DataFormatError

CHECKPOINT_MAGIC = b"PSUCKPT1"

INIT_STD = 0.02

# Additive attention-logit penalty for masked (wrapped) positions in
# shifted windows; exp() underflows to exactly 0, so masked regions
# cannot mix.
ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and capacity of the network.

    The default profile is the desk-scale "tiny" variant for a 192x192
    stacked map; all sizes are validated at construction time.
    """

    input_hw: tuple = (192, 192)
    in_channels: int = 6
    patch_size: int = 4
    window_size: int = 4
    embed_dim: int = 24
    depths: tuple = (2, 2, 2)
    n_heads: tuple = (2, 4, 8)
    shift: bool = True
    mlp_ratio: float = 2.0
    with_decoder: bool = True
    with_hr_head: bool = True
    decoder_sigmoid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(x) for x in self.input_hw))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "n_heads", tuple(int(h) for h in self.n_heads))
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * (2**s)

    def stage_grid(self, s: int) -> tuple[int, int]:
        h, w = self.input_hw
        f = self.patch_size * (2**s)
        return h // f, w // f

    def validate(self) -> None:
        h, w = self.input_hw
        if len(self.depths) != len(self.n_heads):
            raise ConfigError("depths and n_heads must have equal length")
        if min(self.depths) < 1 or min(self.n_heads) < 1:
            raise ConfigError("depths and n_heads must be >= 1")
        if not self.with_decoder and not self.with_hr_head:
            raise ConfigError("model needs a decoder or an HR head")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"input {h}x{w} not divisible by patch {self.patch_size}"
            )
        for s in range(self.n_stages):
            if (h // self.patch_size) % (2**s) or (w // self.patch_size) % (2**s):
                raise ConfigError(f"token grid not mergeable down to stage {s}")
            gh, gw = self.stage_grid(s)
            if gh % self.window_size or gw % self.window_size:
                raise ConfigError(
                    f"stage {s} grid {gh}x{gw} not divisible by window "
                    f"{self.window_size}"
                )
            if self.stage_dim(s) % self.n_heads[s]:
                raise ConfigError(
                    f"stage {s} dim {self.stage_dim(s)} not divisible by "
                    f"{self.n_heads[s]} heads"
                )


def without_hr_head(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, with_hr_head=False)


def without_decoder(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, with_decoder=False)


def config_for_image(
    hw: tuple, in_channels: int, base: Optional[ModelConfig] = None
) -> ModelConfig:
    """Clone a config onto a new input geometry (e.g. unstacked maps)."""
    base = base or ModelConfig()
    return replace(base, input_hw=tuple(hw), in_channels=in_channels)


@dataclass(frozen=True)
class ModelOutput:
    """Forward products: reconstruction and/or HR, batch-major."""

    bvpmap_pred: Optional[torch.Tensor]  # [B, H, W, C]
    hr_pred: Optional[torch.Tensor]  # [B]
    bottleneck: torch.Tensor  # [B, L, C_b]


class ParameterStore:
    """Flat named parameter tensors with gradient slots and a freeze mask."""

    def __init__(self, params: dict, frozen=()):
        self._params = dict(params)
        self._frozen = set(frozen)
        unknown = self._frozen - set(self._params)
        if unknown:
            raise ConfigError(f"freeze mask names unknown params: {unknown}")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def get(self, name: str, default=None):
        return self._params.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    @property
    def frozen(self) -> frozenset:
        return frozenset(self._frozen)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict:
        return {n: p.grad for n, p in self._params.items()}

    def freeze(self, names) -> None:
        names = set(names)
        unknown = names - set(self._params)
        if unknown:
            raise ConfigError(f"cannot freeze unknown params: {unknown}")
        self._frozen |= names
        for n in names:
            self._params[n].requires_grad_(False)

    def unfreeze_all(self) -> None:
        self._frozen.clear()
        for p in self._params.values():
            p.requires_grad_(True)

    def freeze_all_except(self, *prefixes: str) -> None:
        keep = [
            n for n in self._params
            if any(n == p or n.startswith(p + ".") for p in prefixes)
        ]
        if not keep:
            raise ConfigError(f"no parameters match prefixes {prefixes}")
        self.freeze(set(self._params) - set(keep))
        for n in keep:
            self._frozen.discard(n)
            self._params[n].requires_grad_(True)

    def astype(self, dtype: torch.dtype) -> "ParameterStore":
        """Deep copy with a different dtype (float64 for FD checks)."""
        params = {
            n: p.detach().to(dtype).clone().requires_grad_(n not in self._frozen)
            for n, p in self._params.items()
        }
        return ParameterStore(params, self._frozen)

    def clone(self) -> "ParameterStore":
        return self.astype(next(iter(self._params.values())).dtype)

    def copy_values_from(self, other: "ParameterStore") -> None:
        if set(self._params) != set(other._params):
            raise ConfigError("parameter name sets differ")
        with torch.no_grad():
            for n, p in self._params.items():
                p.copy_(other[n])


def _trunc_normal(shape, gen: torch.Generator, std: float = INIT_STD) -> torch.Tensor:
    """Normal(0, std) truncated to +-2 std, resampling the tails."""
    t = torch.empty(*shape, dtype=torch.float32)
    t.normal_(0.0, std, generator=gen)
    for _ in range(16):
        bad = t.abs() > 2.0 * std
        if not bool(bad.any()):
            break
        r = torch.empty(int(bad.sum()), dtype=torch.float32)
        r.normal_(0.0, std, generator=gen)
        t[bad] = r
    return t.clamp_(-2.0 * std, 2.0 * std)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    """Create all parameters: truncated-normal weights, zero biases."""
    gen = torch.Generator().manual_seed(seed)
    params: dict[str, torch.Tensor] = {}

    def weight(name, *shape):
        params[name] = _trunc_normal(shape, gen)

    def zeros(name, *shape):
        params[name] = torch.zeros(*shape, dtype=torch.float32)

    def ones(name, *shape):
        params[name] = torch.ones(*shape, dtype=torch.float32)

    def norm(prefix, dim):
        ones(f"{prefix}.weight", dim)
        zeros(f"{prefix}.bias", dim)

    def linear(prefix, d_in, d_out, bias=True):
        weight(f"{prefix}.weight", d_in, d_out)
        if bias:
            zeros(f"{prefix}.bias", d_out)

    def block(prefix, dim, heads):
        w = cfg.window_size
        norm(f"{prefix}.norm1", dim)
        linear(f"{prefix}.attn.qkv", dim, 3 * dim)
        linear(f"{prefix}.attn.proj", dim, dim)
        weight(f"{prefix}.attn.rel_bias", (2 * w - 1) ** 2, heads)
        norm(f"{prefix}.norm2", dim)
        hidden = int(dim * cfg.mlp_ratio)
        linear(f"{prefix}.mlp.fc1", dim, hidden)
        linear(f"{prefix}.mlp.fc2", hidden, dim)

    p2 = cfg.patch_size**2
    linear("patch_embed", p2 * cfg.in_channels, cfg.embed_dim)
    norm("patch_embed.norm", cfg.embed_dim)

    for s in range(cfg.n_stages):
        for i in range(cfg.depths[s]):
            block(f"enc{s}.blk{i}", cfg.stage_dim(s), cfg.n_heads[s])
        if s < cfg.n_stages - 1:
            norm(f"down{s}.norm", 4 * cfg.stage_dim(s))
            linear(f"down{s}.reduction", 4 * cfg.stage_dim(s),
                   2 * cfg.stage_dim(s), bias=False)

    if cfg.with_decoder:
        for s in range(cfg.n_stages - 2, -1, -1):
            dim = cfg.stage_dim(s)
            linear(f"up{s}.expand", 2 * dim, 4 * dim, bias=False)
            norm(f"up{s}.norm", dim)
            linear(f"dec{s}.fuse", 2 * dim, dim)
            for i in range(cfg.depths[s]):
                block(f"dec{s}.blk{i}", dim, cfg.n_heads[s])
        linear("final.expand", cfg.embed_dim, p2 * cfg.embed_dim, bias=False)
        norm("final.norm", cfg.embed_dim)
        linear("final.out", cfg.embed_dim, cfg.in_channels)

    if cfg.with_hr_head:
        dim_b = cfg.stage_dim(cfg.n_stages - 1)
        weight("hr_head.conv.weight", dim_b, dim_b, 3)
        zeros("hr_head.conv.bias", dim_b)
        linear("hr_head.fc", dim_b, 1)

    for t in params.values():
        t.requires_grad_(True)
    return ParameterStore(params)


# ---------------------------------------------------------------------------
# forward building blocks (functional, batched [B, H, W, C] tensors)
# ---------------------------------------------------------------------------


def _layer_norm(x, p, prefix):
    return torch.nn.functional.layer_norm(
        x, (x.shape[-1],), weight=p[f"{prefix}.weight"], bias=p[f"{prefix}.bias"]
    )


def _linear(x, p, prefix):
    out = x @ p[f"{prefix}.weight"]
    bias = p.get(f"{prefix}.bias")
    return out if bias is None else out + bias


def patch_embed(image: torch.Tensor, p: dict, cfg: ModelConfig) -> torch.Tensor:
    """Project non-overlapping patches to tokens: [B,H,W,C] -> [B,h,w,D]."""
    b, h, w, c = image.shape
    ps = cfg.patch_size
    x = image.reshape(b, h // ps, ps, w // ps, ps, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // ps, w // ps, ps * ps * c)
    x = _linear(x, p, "patch_embed")
    return _layer_norm(x, p, "patch_embed.norm")


def _window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def _window_reverse(win: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    c = win.shape[-1]
    x = win.reshape(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def relative_position_index(ws: int) -> torch.Tensor:
    """Pairwise relative-offset index into the (2w-1)^2 bias table."""
    coords = torch.stack(
        torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")
    ).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]  # [2, w*w, w*w]
    rel = rel.permute(1, 2, 0) + (ws - 1)
    return (rel[..., 0] * (2 * ws - 1) + rel[..., 1]).long()


def shifted_window_mask(h: int, w: int, ws: int, shift: int, dtype) -> torch.Tensor:
    """Per-window additive mask isolating cyclically wrapped regions."""
    img = torch.zeros(1, h, w, 1)
    region = 0.0
    bounds = (slice(0, h - ws), slice(h - ws, h - shift), slice(h - shift, h))
    bounds_w = (slice(0, w - ws), slice(w - ws, w - shift), slice(w - shift, w))
    for hs in bounds:
        for vs in bounds_w:
            img[:, hs, vs, :] = region
            region += 1.0
    labels = _window_partition(img, ws).squeeze(-1)  # [nW, ws*ws]
    diff = labels.unsqueeze(1) != labels.unsqueeze(2)
    return torch.where(
        diff,
        torch.tensor(ATTN_MASK_VALUE, dtype=dtype),
        torch.tensor(0.0, dtype=dtype),
    )


def window_attention(
    x: torch.Tensor,
    p: dict,
    prefix: str,
    n_heads: int,
    window_size: int,
    shifted: bool,
) -> torch.Tensor:
    """Multi-head self-attention within (optionally shifted) windows.

    ``x`` is [B, H, W, C]; the shifted variant cyclic-rolls by half a
    window and masks attention across the wrapped seams.
    """
    b, h, w, c = x.shape
    ws = window_size
    shift = ws // 2 if shifted else 0
    if shifted and shift == 0:
        shifted = False
    if shifted:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))

    win = _window_partition(x, ws)  # [B*nW, L, C]
    n_win = win.shape[0] // b
    l = ws * ws
    hd = c // n_heads
    qkv = _linear(win, p, f"{prefix}.qkv")
    qkv = qkv.reshape(-1, l, 3, n_heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # each [B*nW, heads, L, hd]

    attn = (q @ k.transpose(-2, -1)) * hd**-0.5
    bias = p[f"{prefix}.rel_bias"][relative_position_index(ws)]
    attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
    if shifted:
        mask = shifted_window_mask(h, w, ws, shift, attn.dtype)
        attn = attn.reshape(b, n_win, n_heads, l, l) + mask.unsqueeze(0).unsqueeze(2)
        attn = attn.reshape(-1, n_heads, l, l)
    attn = torch.softmax(attn, dim=-1)

    out = (attn @ v).transpose(1, 2).reshape(-1, l, c)
    out = _linear(out, p, f"{prefix}.proj")
    out = _window_reverse(out, ws, b, h, w)
    if shifted:
        out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
    return out


def _mlp(x, p, prefix):
    y = _linear(x, p, f"{prefix}.fc1")
    y = torch.nn.functional.gelu(y)
    return _linear(y, p, f"{prefix}.fc2")


def _block(x, p, prefix, n_heads, cfg: ModelConfig, shifted: bool):
    y = _layer_norm(x, p, f"{prefix}.norm1")
    x = x + window_attention(
        y, p, f"{prefix}.attn", n_heads, cfg.window_size, shifted
    )
    return x + _mlp(_layer_norm(x, p, f"{prefix}.norm2"), p, f"{prefix}.mlp")


def patch_merge(x: torch.Tensor, p: dict, prefix: str) -> torch.Tensor:
    """Concatenate 2x2 token neighborhoods and halve the grid: dim doubles."""
    x0 = x[:, 0::2, 0::2]
    x1 = x[:, 1::2, 0::2]
    x2 = x[:, 0::2, 1::2]
    x3 = x[:, 1::2, 1::2]
    y = torch.cat([x0, x1, x2, x3], dim=-1)
    y = _layer_norm(y, p, f"{prefix}.norm")
    return _linear(y, p, f"{prefix}.reduction")


def patch_expand(x: torch.Tensor, p: dict, prefix: str) -> torch.Tensor:
    """Double the grid and halve the dim via a learned projection."""
    b, h, w, c = x.shape
    y = _linear(x, p, f"{prefix}.expand")  # [B, h, w, 2c]
    y = y.reshape(b, h, w, 2, 2, c // 2)
    y = y.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, c // 2)
    return _layer_norm(y, p, f"{prefix}.norm")


def final_patch_expand(x: torch.Tensor, p: dict, cfg: ModelConfig) -> torch.Tensor:
    """Expand stage-0 tokens back to pixel resolution (dim preserved)."""
    b, h, w, c = x.shape
    ps = cfg.patch_size
    y = _linear(x, p, "final.expand")  # [B, h, w, ps*ps*c]
    y = y.reshape(b, h, w, ps, ps, c)
    y = y.permute(0, 1, 3, 2, 4, 5).reshape(b, h * ps, w * ps, c)
    return _layer_norm(y, p, "final.norm")


def hr_head(tokens: torch.Tensor, p: dict) -> torch.Tensor:
    """1-D conv over the token sequence, ReLU, adaptive mean pool, FC.

    Replicate padding keeps the head invariant to sequence length for
    constant token sequences (the pooling contract).
    """
    x = tokens.transpose(1, 2)  # [B, C, L]
    x = torch.nn.functional.pad(x, (1, 1), mode="replicate")
    x = torch.nn.functional.conv1d(
        x, p["hr_head.conv.weight"], p["hr_head.conv.bias"]
    )
    x = torch.relu(x)
    x = x.mean(dim=-1)  # adaptive average pool to length 1
    return _linear(x, p, "hr_head.fc").squeeze(-1)


def forward(
    image,
    store: ParameterStore,
    cfg: ModelConfig,
    dtype: torch.dtype = torch.float32,
) -> ModelOutput:
    """Full forward pass on a [B, H, W, C] (or single [H, W, C]) image."""
    x_in = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if x_in.dim() == 3:
        x_in = x_in.unsqueeze(0)
    if x_in.dim() != 4:
        raise ConfigError(f"expected [B,H,W,C] image, got {tuple(x_in.shape)}")
    b, h, w, c = x_in.shape
    if (h, w) != cfg.input_hw or c != cfg.in_channels:
        raise ConfigError(
            f"image {h}x{w}x{c} does not match config "
            f"{cfg.input_hw[0]}x{cfg.input_hw[1]}x{cfg.in_channels}"
        )
    x_in = x_in.to(dtype)
    p = {n: t.to(dtype) for n, t in store.items()}

    x = patch_embed(x_in, p, cfg)
    skips = []
    for s in range(cfg.n_stages):
        for i in range(cfg.depths[s]):
            shifted = cfg.shift and i % 2 == 1
            x = _block(x, p, f"enc{s}.blk{i}", cfg.n_heads[s], cfg, shifted)
        if s < cfg.n_stages - 1:
            skips.append(x)
            x = patch_merge(x, p, f"down{s}")

    gh, gw = cfg.stage_grid(cfg.n_stages - 1)
    bottleneck = x.reshape(b, gh * gw, cfg.stage_dim(cfg.n_stages - 1))

    hr = hr_head(bottleneck, p) if cfg.with_hr_head else None

    out_image = None
    if cfg.with_decoder:
        y = x
        for s in range(cfg.n_stages - 2, -1, -1):
            y = patch_expand(y, p, f"up{s}")
            y = torch.cat([y, skips[s]], dim=-1)
            y = _linear(y, p, f"dec{s}.fuse")
            for i in range(cfg.depths[s]):
                shifted = cfg.shift and i % 2 == 1
                y = _block(y, p, f"dec{s}.blk{i}", cfg.n_heads[s], cfg, shifted)
        y = final_patch_expand(y, p, cfg)
        out_image = _linear(y, p, "final.out")
        if cfg.decoder_sigmoid:
            out_image = torch.sigmoid(out_image)

    return ModelOutput(out_image, hr, bottleneck)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_to_json(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_json(d: dict) -> ModelConfig:
    try:
        return ModelConfig(**d)
    except TypeError as exc:
        raise DataFormatError(f"bad model config: {exc}") from exc


def save_checkpoint(
    path, store: ParameterStore, cfg: ModelConfig, extra: Optional[dict] = None
) -> None:
    """Write magic + JSON header + named little-endian float32 tensors."""
    names = sorted(store.names())
    header = {
        "config": config_to_json(cfg),
        "extra": extra or {},
        "frozen": sorted(store.frozen),
        "tensors": [
            {"name": n, "shape": list(store[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            t = store[n].detach().to(torch.float32).contiguous()
            f.write(t.numpy().astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig, dict]:
    """Inverse of :func:`save_checkpoint`."""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise DataFormatError(f"{path}: not a PSUCKPT1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + hlen > len(data):
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    cfg = config_from_json(header["config"])
    params = {}
    for spec in header["tensors"]:
        shape = tuple(int(x) for x in spec["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        if off + nbytes > len(data):
            raise DataFormatError(f"{path}: truncated tensor {spec['name']}")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f4").reshape(shape)
        params[spec["name"]] = torch.from_numpy(arr.copy())
        off += nbytes
    if off != len(data):
        raise DataFormatError(f"{path}: trailing bytes after tensors")
    store = ParameterStore(params, frozen=header.get("frozen", ()))
    for n in store.names():
        store[n].requires_grad_(not store.is_frozen(n))
    return store, cfg, header.get("extra", {})
