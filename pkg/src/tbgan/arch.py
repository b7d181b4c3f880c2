"""Trunk-branch generator and discriminator with progressive growing.

The generator trunk maps ``[z | p]`` to a feature grid at level ``d``;
three branches (texture, normals, shape) continue the upsampling to
level ``L``. The discriminator mirrors it: per-modality branches run from
level ``L`` down to ``d``, their activations are concatenated and a shared
trunk reduces them to a real/fake score plus expression logits.

Level ``k`` means spatial size ``base_resolution * 2**k``. Every level has
its own 1x1 output (generator) and input (discriminator) head so that a
network can be evaluated, and faded in, at any level up to ``L``.
"""
from dataclasses import asdict, dataclass
import json
import math
import os
from pathlib import Path
import shutil

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .container import dump_json
from .errors import ConfigError, ContractError
from .uvcodec import MODALITIES, ModalityBundle, bundle_concat, bundle_split

CHECKPOINT_VERSION = 1


def default_channel_schedule(L, max_channels=512, min_channels=16):
    """Channels per level, halving from ``max_channels`` with a floor."""
    return [max(min_channels, max_channels >> level) for level in range(L + 1)]


@dataclass
class ArchConfig:
    L: int = 8
    d: int = 6
    base_resolution: int = 4
    latent_dim: int = 512
    channel_schedule: list = None
    n_expressions: int = 7
    leaky_slope: float = 0.2
    pixel_norm: bool = True
    equalized_lr: bool = True
    max_channels: int = 512
    min_channels: int = 16

    def __post_init__(self):
        if self.channel_schedule is None:
            self.channel_schedule = default_channel_schedule(
                self.L, self.max_channels, self.min_channels)
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        self.validate()

    def validate(self):
        if not 0 < self.d < self.L:
            raise ConfigError(f"need 0 < d < L, got d={self.d}, L={self.L}")
        if self.base_resolution < 1:
            raise ConfigError("base_resolution must be positive")
        if len(self.channel_schedule) != self.L + 1:
            raise ConfigError(
                f"channel_schedule needs L+1={self.L + 1} entries, got {len(self.channel_schedule)}")
        if min(self.channel_schedule) < 1 or self.latent_dim < 1 or self.n_expressions < 0:
            raise ConfigError("channel counts, latent_dim and n_expressions must be positive")

    def resolution(self, level=None):
        return self.base_resolution * 2 ** (self.L if level is None else level)

    @property
    def output_resolution(self):
        return self.resolution(self.L)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown arch fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GrowthState:
    level: int
    blend: float = 1.0

    def __post_init__(self):
        if self.level < 0 or not 0.0 <= self.blend <= 1.0:
            raise ContractError(f"invalid growth state {self}")


def growth_schedule(images_seen, config, fade_images=8000, stable_images=8000, initial_level=0):
    """Progressive-growing state after ``images_seen`` training images.

    The initial level trains for ``stable_images``; every later level is
    faded in linearly over ``fade_images`` and then stabilized for
    ``stable_images``. The final level ``L`` is kept forever.
    """
    if images_seen < 0:
        raise ValueError("images_seen must be non-negative")
    if images_seen < stable_images or initial_level >= config.L:
        return GrowthState(min(initial_level, config.L), 1.0)
    period = fade_images + stable_images
    steps, offset = divmod(images_seen - stable_images, period)
    level = initial_level + 1 + steps
    if level > config.L:
        return GrowthState(config.L, 1.0)
    blend = 1.0 if offset >= fade_images else offset / fade_images
    return GrowthState(level, float(blend))


# ---------------------------------------------------------------------------
# Layers


class EqualizedLinear(nn.Module):
    def __init__(self, in_features, out_features, gain=math.sqrt(2.0), equalized=True):
        super().__init__()
        std = gain / math.sqrt(in_features)
        self.scale = std if equalized else 1.0
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * (1.0 if equalized else std))
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, gain=math.sqrt(2.0), equalized=True):
        super().__init__()
        std = gain / math.sqrt(in_channels * kernel_size * kernel_size)
        self.scale = std if equalized else 1.0
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size)
            * (1.0 if equalized else std))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


def pixel_norm(x, eps=1e-8):
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class GBlock(nn.Module):
    """Upsample x2 followed by two 3x3 convolutions."""

    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv1 = EqualizedConv2d(cin, cout, 3, equalized=cfg.equalized_lr)
        self.conv2 = EqualizedConv2d(cout, cout, 3, equalized=cfg.equalized_lr)
        self.slope = cfg.leaky_slope
        self.norm = cfg.pixel_norm

    def _act(self, x):
        x = F.leaky_relu(x, self.slope)
        return pixel_norm(x) if self.norm else x

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self._act(self.conv2(self._act(self.conv1(x))))


class DBlock(nn.Module):
    """Two 3x3 convolutions followed by 2x2 average pooling."""

    def __init__(self, cin, cmid, cout, cfg):
        super().__init__()
        self.conv1 = EqualizedConv2d(cin, cmid, 3, equalized=cfg.equalized_lr)
        self.conv2 = EqualizedConv2d(cmid, cout, 3, equalized=cfg.equalized_lr)
        self.slope = cfg.leaky_slope

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), self.slope)
        x = F.leaky_relu(self.conv2(x), self.slope)
        return F.avg_pool2d(x, 2)


# ---------------------------------------------------------------------------
# Networks


class Generator(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.channel_schedule
        base = config.base_resolution
        eq = config.equalized_lr
        self.input_dense = EqualizedLinear(
            config.latent_dim + config.n_expressions, ch[0] * base * base,
            gain=math.sqrt(2.0) / 4, equalized=eq)
        self.input_conv = EqualizedConv2d(ch[0], ch[0], 3, equalized=eq)
        self.trunk = nn.ModuleList(GBlock(ch[k - 1], ch[k], config) for k in range(1, config.d + 1))
        self.trunk_heads = nn.ModuleList(
            EqualizedConv2d(ch[k], 3 * len(MODALITIES), 1, gain=1.0, equalized=eq)
            for k in range(config.d + 1))
        self.branches = nn.ModuleDict({
            m: nn.ModuleList(GBlock(ch[k - 1], ch[k], config)
                             for k in range(config.d + 1, config.L + 1))
            for m in MODALITIES})
        self.branch_heads = nn.ModuleDict({
            m: nn.ModuleList(EqualizedConv2d(ch[k], 3, 1, gain=1.0, equalized=eq)
                             for k in range(config.d + 1, config.L + 1))
            for m in MODALITIES})

    def _act(self, x):
        x = F.leaky_relu(x, self.config.leaky_slope)
        return pixel_norm(x) if self.config.pixel_norm else x

    def _rgb(self, level, feats):
        """Nine-channel output at ``level`` from trunk or per-branch features."""
        d = self.config.d
        if level <= d:
            return self.trunk_heads[level](feats)
        return torch.cat([self.branch_heads[m][level - d - 1](feats[m]) for m in MODALITIES], dim=1)

    def forward(self, z, p=None, level=None, blend=1.0):
        cfg = self.config
        level = cfg.L if level is None else level
        if not 0 <= level <= cfg.L:
            raise ContractError(f"level {level} outside [0, {cfg.L}]")
        if z.dim() != 2 or z.shape[1] != cfg.latent_dim:
            raise ContractError(f"z must be B x {cfg.latent_dim}, got {tuple(z.shape)}")
        if cfg.n_expressions:
            if p is None or p.shape != (z.shape[0], cfg.n_expressions):
                raise ContractError(f"p must be B x {cfg.n_expressions}")
            x = torch.cat([pixel_norm(z) if cfg.pixel_norm else z, p.to(z.dtype)], dim=1)
        else:
            x = pixel_norm(z) if cfg.pixel_norm else z

        base = cfg.base_resolution
        h = self._act(self.input_dense(x).view(-1, cfg.channel_schedule[0], base, base))
        h = self._act(self.input_conv(h))
        prev = None
        feats = h
        for k in range(1, level + 1):
            prev = feats
            if k <= cfg.d:
                feats = self.trunk[k - 1](feats)
            elif k == cfg.d + 1:
                feats = {m: self.branches[m][0](feats) for m in MODALITIES}
            else:
                feats = {m: self.branches[m][k - cfg.d - 1](feats[m]) for m in MODALITIES}
        out = self._rgb(level, feats)
        if blend < 1.0 and level > 0:
            low = F.interpolate(self._rgb(level - 1, prev), scale_factor=2, mode="nearest")
            out = low + blend * (out - low)
        return out


class Discriminator(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.channel_schedule
        eq = config.equalized_lr
        d, L = config.d, config.L
        n_in = 3 * len(MODALITIES)
        # Input heads: joint below the split level, per modality from d upwards.
        self.trunk_inputs = nn.ModuleList(
            EqualizedConv2d(n_in, ch[k], 1, equalized=eq) for k in range(d))
        self.branch_inputs = nn.ModuleDict({
            m: nn.ModuleList(EqualizedConv2d(3, ch[k], 1, equalized=eq) for k in range(d, L + 1))
            for m in MODALITIES})
        self.branches = nn.ModuleDict({
            m: nn.ModuleList(DBlock(ch[k], ch[k], ch[k - 1], config) for k in range(d + 1, L + 1))
            for m in MODALITIES})
        concat = len(MODALITIES) * ch[d]
        self.trunk = nn.ModuleList(
            DBlock(concat if k == d else ch[k], ch[k], ch[k - 1], config) for k in range(1, d + 1))
        base = config.base_resolution
        self.final_conv = EqualizedConv2d(ch[0], ch[0], 3, equalized=eq)
        self.final_dense = EqualizedLinear(ch[0] * base * base, ch[0], equalized=eq)
        self.score_head = EqualizedLinear(ch[0], 1, gain=1.0, equalized=eq)
        self.class_head = EqualizedLinear(ch[0], max(config.n_expressions, 1), gain=1.0, equalized=eq)

    def _act(self, x):
        return F.leaky_relu(x, self.config.leaky_slope)

    def _from_rgb(self, level, x):
        """Features at ``level`` from a nine-channel image at that level."""
        d = self.config.d
        if level < d:
            return self._act(self.trunk_inputs[level](x))
        parts = torch.split(x, 3, dim=1)
        feats = {m: self._act(self.branch_inputs[m][level - d](part))
                 for m, part in zip(MODALITIES, parts)}
        return feats

    def _down(self, k, feats):
        """Apply the block that takes level ``k`` features to level ``k-1``."""
        d = self.config.d
        if k > d:
            return {m: self.branches[m][k - d - 1](feats[m]) for m in MODALITIES}
        if k == d:
            feats = torch.cat([feats[m] for m in MODALITIES], dim=1)
        return self.trunk[k - 1](feats)

    def forward(self, x, level=None, blend=1.0):
        cfg = self.config
        level = cfg.L if level is None else level
        if not 0 <= level <= cfg.L:
            raise ContractError(f"level {level} outside [0, {cfg.L}]")
        res = cfg.resolution(level)
        if x.dim() != 4 or x.shape[1] != 9 or x.shape[2] != res or x.shape[3] != res:
            raise ContractError(f"expected B x 9 x {res} x {res} input, got {tuple(x.shape)}")
        feats = self._from_rgb(level, x)
        if level > 0:
            feats = self._down(level, feats)
            if blend < 1.0:
                low = self._from_rgb(level - 1, F.avg_pool2d(x, 2))
                if isinstance(feats, dict):
                    feats = {m: low[m] + blend * (feats[m] - low[m]) for m in MODALITIES}
                else:
                    feats = low + blend * (feats - low)
            for k in range(level - 1, 0, -1):
                feats = self._down(k, feats)
        h = self._act(self.final_conv(feats))
        h = self._act(self.final_dense(h.flatten(1)))
        score = self.score_head(h).squeeze(1)
        logits = self.class_head(h)[:, :cfg.n_expressions]
        return score, logits


def _seeded_build(cls, config, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(config)


def build_generator(config, seed=0):
    """Deterministically initialized generator."""
    return _seeded_build(Generator, config, seed)


def build_discriminator(config, seed=0):
    """Deterministically initialized discriminator."""
    return _seeded_build(Discriminator, config, seed)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def parameter_digest(module):
    """SHA-256 over all parameter bytes, for change detection."""
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Bundle-level wrappers


def bundles_to_tensor(bundles, dtype=torch.float32):
    arr = np.stack([bundle_concat(b) for b in bundles])  # B x H x W x 9
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def tensor_to_bundles(x, mask=None, labels=None, topology_id="default"):
    arr = x.detach().cpu().permute(0, 2, 3, 1).numpy().astype(np.float32)
    if mask is None:
        mask = np.ones(arr.shape[1:3], dtype=bool)
    out = []
    for i, a in enumerate(arr):
        label = None if labels is None else np.asarray(labels[i], dtype=np.float64)
        out.append(bundle_split(a, mask, label, topology_id=topology_id))
    return out


def generator_forward(G, z, p, growth=None, mask=None, topology_id="default"):
    """Generate bundles for a batch of latents ``z`` and labels ``p``.

    A single 1-D latent yields a single bundle.
    """
    single = np.ndim(z) == 1
    z_t = torch.as_tensor(np.atleast_2d(z), dtype=next(G.parameters()).dtype)
    p_np = np.atleast_2d(np.asarray(p, dtype=np.float64)) if p is not None else None
    if p_np is not None and len(p_np) == 1 and len(z_t) > 1:
        p_np = np.repeat(p_np, len(z_t), axis=0)
    p_t = None if p_np is None else torch.as_tensor(p_np, dtype=z_t.dtype)
    growth = growth or GrowthState(G.config.L)
    if mask is not None and mask.shape[0] != G.config.resolution(growth.level):
        mask = None
    with torch.no_grad():
        x = G(z_t, p_t, growth.level, growth.blend)
    bundles = tensor_to_bundles(x, mask, p_np, topology_id)
    return bundles[0] if single else bundles


def discriminator_forward(D, bundles, growth=None):
    """Score and expression logits for bundles or a B x 9 x H x W tensor."""
    growth = growth or GrowthState(D.config.L)
    if isinstance(bundles, ModalityBundle):
        bundles = [bundles]
    x = bundles if torch.is_tensor(bundles) else bundles_to_tensor(
        bundles, next(D.parameters()).dtype)
    return D(x, growth.level, growth.blend)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, G, D, config, growth, step, extra=None, train_config=None):
    """Write ``manifest.json`` + ``params.pt`` atomically into directory ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    blob = {"generator": G.state_dict(), "discriminator": D.state_dict()}
    if extra:
        blob.update(extra)
    torch.save(blob, tmp / "params.pt")
    manifest = {
        "kind": "tbgan.checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "arch": config.to_dict(),
        "growth": {"level": growth.level, "blend": growth.blend},
        "step": int(step),
        "train": train_config,
    }
    dump_json(manifest, tmp / "manifest.json")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return ``(G, D, manifest, blob)`` from a checkpoint directory."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {manifest.get('format_version')}")
    config = ArchConfig.from_dict(manifest["arch"])
    blob = torch.load(path / "params.pt", map_location="cpu", weights_only=False)
    G = Generator(config)
    D = Discriminator(config)
    G.load_state_dict(blob["generator"])
    D.load_state_dict(blob["discriminator"])
    return G, D, manifest, blob
