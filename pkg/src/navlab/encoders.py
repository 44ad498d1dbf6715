"""Binocular fusion encoders: how the observation meets the goal image.

Every encoder maps a pair of views (current observation, goal) to a fixed
width embedding, and also exposes the token grid right before pooling so
probes can read per-location features.

Kinds:
  * ``late_fusion``  -- two separate conv towers, features concatenated at
    the very end.  Tower widths are narrower than the single-tower variants
    so all kinds land in the same parameter budget.
  * ``channel_cat``  -- both views stacked on the channel axis ahead of one
    conv tower, so fusion starts at the first kernel.
  * ``cross_attention`` -- one shared token encoder applied to both views,
    then decoder blocks whose queries come from the observation and whose
    keys and values come from the goal.

Conv variants accept a space-to-depth flag that rearranges the input into
16x more channels at a quarter of the resolution before the first kernel,
trading depth of the stride pyramid for early full-image context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

LATE_FUSION = "late_fusion"
CHANNEL_CAT = "channel_cat"
CROSS_ATTENTION = "cross_attention"
ENCODER_KINDS = (LATE_FUSION, CHANNEL_CAT, CROSS_ATTENTION)


# ---------------------------------------------------------------------------
# module framework
# ---------------------------------------------------------------------------

class Module:
    """Named container of parameters and child modules."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[Parameter] = []
        self._children: list[Module] = []

    def param(self, key: str, data: np.ndarray) -> Parameter:
        p = Parameter(data, name=f"{self.name}.{key}")
        self._params.append(p)
        return p

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        out = {p.name: p for p in self.parameters()}
        if len(out) != len(self.parameters()):
            raise ValueError(f"duplicate parameter names under {self.name}")
        return out


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


class Linear(Module):
    def __init__(self, name: str, rng: np.random.Generator, din: int, dout: int,
                 bias: bool = True):
        super().__init__(name)
        self.w = self.param("w", ad.he_normal(rng, (din, dout), fan_in=din))
        self.b = self.param("b", np.zeros(dout, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class Conv(Module):
    def __init__(self, name: str, rng: np.random.Generator, cin: int, cout: int,
                 k: int = 3, stride: int = 1, padding: int = 1):
        super().__init__(name)
        self.stride = stride
        self.padding = padding
        self.w = self.param("w", ad.he_normal(rng, (cout, cin, k, k),
                                              fan_in=cin * k * k))
        self.b = self.param("b", np.zeros(cout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        super().__init__(name)
        self.g = self.param("g", np.ones(dim, dtype=np.float32))
        self.b = self.param("b", np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b, axis=-1)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    kind: str = CHANNEL_CAT
    image_size: int = 32
    embed_dim: int = 128
    space_to_depth: bool = False
    s2d_block: int = 4
    cnn_widths: tuple[int, ...] = (32, 64, 128, 128)
    late_widths: tuple[int, ...] = (22, 44, 88, 88)
    vit_dim: int = 80
    vit_patch: int = 4
    vit_heads: int = 4
    vit_enc_blocks: int = 2
    vit_dec_blocks: int = 2

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "image_size": self.image_size,
            "embed_dim": self.embed_dim,
            "space_to_depth": self.space_to_depth,
            "s2d_block": self.s2d_block,
            "cnn_widths": list(self.cnn_widths),
            "late_widths": list(self.late_widths),
            "vit_dim": self.vit_dim,
            "vit_patch": self.vit_patch,
            "vit_heads": self.vit_heads,
            "vit_enc_blocks": self.vit_enc_blocks,
            "vit_dec_blocks": self.vit_dec_blocks,
        }

    @staticmethod
    def from_json(obj: dict) -> "EncoderConfig":
        cfg = EncoderConfig()
        for k, v in obj.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown encoder config key {k!r}")
            if k in ("cnn_widths", "late_widths"):
                v = tuple(v)
            setattr(cfg, k, v)
        if cfg.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {cfg.kind!r}")
        return cfg


# ---------------------------------------------------------------------------
# conv towers
# ---------------------------------------------------------------------------

def _conv_out(size: int, stride: int) -> int:
    # k=3, padding=1
    return (size - 1) // stride + 1


class ConvTower(Module):
    """Four 3x3 conv + relu stages.  With space-to-depth the input is
    rearranged first and two stages keep stride 1 so the output grid matches
    the plain pyramid."""

    def __init__(self, name: str, rng: np.random.Generator, in_channels: int,
                 widths: tuple[int, ...], image_size: int,
                 space_to_depth: bool = False, s2d_block: int = 4):
        super().__init__(name)
        self.space_to_depth = space_to_depth
        self.s2d_block = s2d_block
        size = image_size
        cin = in_channels
        if space_to_depth:
            if image_size % s2d_block:
                raise ValueError(f"image size {image_size} not divisible by {s2d_block}")
            size = image_size // s2d_block
            cin = in_channels * s2d_block * s2d_block
            strides = (1, 2, 2, 1)
        else:
            strides = (2, 2, 2, 2)
        self.convs: list[Conv] = []
        for i, (w, s) in enumerate(zip(widths, strides)):
            self.convs.append(self.child(Conv(f"{name}.conv{i + 1}", rng, cin, w,
                                              stride=s)))
            cin = w
            size = _conv_out(size, s)
        self.out_channels = widths[-1]
        self.out_size = size
        self.out_dim = widths[-1] * size * size

    def __call__(self, x: Tensor) -> Tensor:
        if self.space_to_depth:
            x = ad.space_to_depth(x, self.s2d_block)
        for conv in self.convs:
            x = ad.relu(conv(x))
        return x


class LateFusionEncoder(Module):
    def __init__(self, name: str, rng: np.random.Generator, cfg: EncoderConfig):
        super().__init__(name)
        self.config = cfg
        self.obs_tower = self.child(ConvTower(
            f"{name}.obs_tower", rng, 3, cfg.late_widths, cfg.image_size,
            cfg.space_to_depth, cfg.s2d_block))
        self.goal_tower = self.child(ConvTower(
            f"{name}.goal_tower", rng, 3, cfg.late_widths, cfg.image_size,
            cfg.space_to_depth, cfg.s2d_block))
        fused = self.obs_tower.out_dim + self.goal_tower.out_dim
        self.head = self.child(Linear(f"{name}.head", rng, fused, cfg.embed_dim))
        self.token_dim = 2 * self.obs_tower.out_channels
        self.num_tokens = self.obs_tower.out_size ** 2

    def tokens(self, obs: Tensor, goal: Tensor) -> Tensor:
        fo = self.obs_tower(obs)
        fg = self.goal_tower(goal)
        cat = ad.concat([fo, fg], axis=1)  # [N, 2C, h, w]
        n, c, h, w = cat.shape
        return ad.transpose(ad.reshape(cat, (n, c, h * w)), (0, 2, 1))

    def __call__(self, obs: Tensor, goal: Tensor) -> Tensor:
        fo = self.obs_tower(obs)
        fg = self.goal_tower(goal)
        n = fo.shape[0]
        flat = ad.concat([ad.reshape(fo, (n, -1)), ad.reshape(fg, (n, -1))], axis=1)
        return self.head(flat)


class ChannelCatEncoder(Module):
    def __init__(self, name: str, rng: np.random.Generator, cfg: EncoderConfig):
        super().__init__(name)
        self.config = cfg
        self.tower = self.child(ConvTower(
            f"{name}.tower", rng, 6, cfg.cnn_widths, cfg.image_size,
            cfg.space_to_depth, cfg.s2d_block))
        self.head = self.child(Linear(f"{name}.head", rng,
                                      self.tower.out_dim, cfg.embed_dim))
        self.token_dim = self.tower.out_channels
        self.num_tokens = self.tower.out_size ** 2

    def _features(self, obs: Tensor, goal: Tensor) -> Tensor:
        return self.tower(ad.concat([obs, goal], axis=1))

    def tokens(self, obs: Tensor, goal: Tensor) -> Tensor:
        f = self._features(obs, goal)
        n, c, h, w = f.shape
        return ad.transpose(ad.reshape(f, (n, c, h * w)), (0, 2, 1))

    def __call__(self, obs: Tensor, goal: Tensor) -> Tensor:
        f = self._features(obs, goal)
        n = f.shape[0]
        return self.head(ad.reshape(f, (n, -1)))


# ---------------------------------------------------------------------------
# cross-attention encoder
# ---------------------------------------------------------------------------

class AttentionBlock(Module):
    """Pre-norm transformer block; cross attention when a context is given."""

    def __init__(self, name: str, rng: np.random.Generator, dim: int, heads: int,
                 cross: bool = False):
        super().__init__(name)
        self.heads = heads
        self.cross = cross
        self.ln1 = self.child(LayerNorm(f"{name}.ln1", dim))
        self.wq = self.child(Linear(f"{name}.wq", rng, dim, dim))
        self.wk = self.child(Linear(f"{name}.wk", rng, dim, dim))
        self.wv = self.child(Linear(f"{name}.wv", rng, dim, dim))
        self.wo = self.child(Linear(f"{name}.wo", rng, dim, dim))
        self.ln2 = self.child(LayerNorm(f"{name}.ln2", dim))
        self.mlp1 = self.child(Linear(f"{name}.mlp1", rng, dim, 4 * dim))
        self.mlp2 = self.child(Linear(f"{name}.mlp2", rng, 4 * dim, dim))

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        src = context if (self.cross and context is not None) else x
        q = self.wq(self.ln1(x))
        k = self.wk(src)
        v = self.wv(src)
        att = ad.multi_head_attention(q, k, v, self.heads)
        x = x + self.wo(att)
        x = x + self.mlp2(ad.gelu(self.mlp1(self.ln2(x))))
        return x


class CrossAttentionEncoder(Module):
    """Shared token encoder over both views; observation queries the goal."""

    def __init__(self, name: str, rng: np.random.Generator, cfg: EncoderConfig):
        super().__init__(name)
        self.config = cfg
        if cfg.image_size % cfg.vit_patch:
            raise ValueError("image size not divisible by patch size")
        side = cfg.image_size // cfg.vit_patch
        self.num_tokens = side * side
        self.token_dim = cfg.vit_dim
        self.patch = cfg.vit_patch
        patch_dim = 3 * cfg.vit_patch ** 2
        self.patch_embed = self.child(Linear(f"{name}.patch_embed", rng,
                                             patch_dim, cfg.vit_dim))
        self.pos = self.param("pos", ad.trunc_normal(
            rng, (1, self.num_tokens, cfg.vit_dim)))
        self.enc_blocks = [self.child(AttentionBlock(f"{name}.enc{i + 1}", rng,
                                                     cfg.vit_dim, cfg.vit_heads))
                           for i in range(cfg.vit_enc_blocks)]
        self.enc_norm = self.child(LayerNorm(f"{name}.enc_norm", cfg.vit_dim))
        self.dec_blocks = [self.child(AttentionBlock(f"{name}.dec{i + 1}", rng,
                                                     cfg.vit_dim, cfg.vit_heads,
                                                     cross=True))
                           for i in range(cfg.vit_dec_blocks)]
        self.dec_norm = self.child(LayerNorm(f"{name}.dec_norm", cfg.vit_dim))
        self.head = self.child(Linear(f"{name}.head", rng, cfg.vit_dim,
                                      cfg.embed_dim))

    def _tokenize(self, img: Tensor) -> Tensor:
        # patches via the same rearrangement the conv stem flag uses
        n = img.shape[0]
        p = ad.space_to_depth(img, self.patch)  # [N, 3p^2, s, s]
        p = ad.transpose(ad.reshape(p, (n, p.shape[1], self.num_tokens)), (0, 2, 1))
        x = self.patch_embed(p) + self.pos
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_norm(x)

    def tokens(self, obs: Tensor, goal: Tensor) -> Tensor:
        x = self._tokenize(obs)
        ctx = self._tokenize(goal)
        for blk in self.dec_blocks:
            x = blk(x, ctx)
        return self.dec_norm(x)

    def __call__(self, obs: Tensor, goal: Tensor) -> Tensor:
        x = self.tokens(obs, goal)
        return self.head(ad.mean_pool(x, axis=1))


# ---------------------------------------------------------------------------
# factory
# ---------------------------------------------------------------------------

def build_encoder(cfg: EncoderConfig, rng: np.random.Generator,
                  name: str = "phi") -> Module:
    if cfg.kind == LATE_FUSION:
        return LateFusionEncoder(name, rng, cfg)
    if cfg.kind == CHANNEL_CAT:
        return ChannelCatEncoder(name, rng, cfg)
    if cfg.kind == CROSS_ATTENTION:
        if cfg.space_to_depth:
            raise ValueError("space_to_depth applies to conv encoders only")
        return CrossAttentionEncoder(name, rng, cfg)
    raise ValueError(f"unknown encoder kind {cfg.kind!r}")


def encoder_variants() -> dict[str, EncoderConfig]:
    """The four default builds whose parameter budgets must stay comparable."""
    return {
        "late_fusion": EncoderConfig(kind=LATE_FUSION),
        "channel_cat": EncoderConfig(kind=CHANNEL_CAT),
        "channel_cat_s2d": EncoderConfig(kind=CHANNEL_CAT, space_to_depth=True),
        "cross_attention": EncoderConfig(kind=CROSS_ATTENTION),
    }
