"""Encoder-decoder range-image segmentation network built from SAC blocks.

Layout for an (h, w) input, channels C1..C5::

    stage s:  transition conv 3x3 (stride 2 before stages 2-4) + BN + act
              blocks: [SAC 3x3 -> BN/act -> follow 3x3, + input] -> BN/act
                      -> plain 3x3 -> BN/act
    decoder:  3 x [transposed conv x2 -> BN/act, + encoder skip, 3x3 conv -> BN/act]
    heads:    1x1 conv on stages 2-5 and on the decoder output

Stage resolutions are 1, 1/2, 1/4, 1/8, 1/8. The decoder head doubles as the
full-resolution term of the multi-layer loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, NormAct
from .sac import VARIANTS, SacLayer
from .tensor import ShapeError, Tensor, as_tensor, get_default_dtype

RESOLUTION_FACTORS = (1, 2, 4, 8, 8)
STAGE_STRIDES = (1, 2, 2, 2, 1)
BASE_CHANNELS = (64, 128, 256, 256, 256)
BASE_DECODER = (256, 128, 64)


@dataclass
class NetworkConfig:
    blocks_per_stage: tuple[int, ...] = (1, 1, 2, 2, 1)
    stage_channels: tuple[int, ...] | None = None
    decoder_channels: tuple[int, ...] | None = None
    sac_variant: str = "ISK"           # "S", "IS", "SK", "ISK" or "none"
    attention_kernel: int = 7
    kernel_size: int = 3
    num_classes: int = 6
    input_hw: tuple[int, int] = (64, 512)
    tiny_scale: float = 1.0
    in_channels: int = 5
    coord_channels: int = 3
    norm: bool = True
    slope: float = 0.1
    # per-channel input normalisation; coords use the first coord_channels entries
    feature_mean: tuple[float, ...] | None = None
    feature_std: tuple[float, ...] | None = None

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.input_hw = tuple(int(s) for s in self.input_hw)
        if self.stage_channels is None:
            self.stage_channels = tuple(_scaled(c, self.tiny_scale) for c in BASE_CHANNELS)
        if self.decoder_channels is None:
            self.decoder_channels = tuple(_scaled(c, self.tiny_scale) for c in BASE_DECODER)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        for name in ("feature_mean", "feature_std"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, tuple(float(x) for x in v))
        if len(self.blocks_per_stage) != 5 or len(self.stage_channels) != 5:
            raise ValueError("need exactly five stages")
        if len(self.decoder_channels) != 3:
            raise ValueError("need exactly three decoder blocks")
        if any(b < 0 for b in self.blocks_per_stage) or any(c <= 0 for c in self.stage_channels):
            raise ValueError("block counts must be >= 0 and channels > 0")
        if self.attention_kernel <= 0 or self.attention_kernel % 2 == 0:
            raise ValueError(f"attention kernel must be odd, got {self.attention_kernel}")
        if self.sac_variant != "none" and self.sac_variant not in VARIANTS:
            raise ValueError(f"unknown SAC variant {self.sac_variant!r}")
        h, w = self.input_hw
        if h % 8 or w % 8:
            raise ValueError(f"input size {self.input_hw} must be divisible by 8")

    @property
    def uses_sac(self) -> bool:
        return self.sac_variant != "none"

    def twin(self) -> "NetworkConfig":
        """The same network with every attention map removed."""
        return replace(self, sac_variant="none")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _scaled(c: int, scale: float) -> int:
    return max(1, int(round(c * scale)))


def ssgv3_21(**kw) -> NetworkConfig:
    return NetworkConfig(blocks_per_stage=(1, 1, 2, 2, 1), **kw)


def ssgv3_53(**kw) -> NetworkConfig:
    return NetworkConfig(blocks_per_stage=(1, 2, 8, 8, 4), **kw)


def tiny(scale: float = 1 / 8, **kw) -> NetworkConfig:
    return NetworkConfig(blocks_per_stage=(1, 1, 2, 2, 1), tiny_scale=scale, **kw)


PRESETS = {"ssgv3-21": ssgv3_21, "ssgv3-53": ssgv3_53, "tiny": tiny}


@dataclass
class StageOutput:
    feature: Tensor
    head_logits: Tensor | None
    resolution_factor: int


def downsample_coord_map(coord_map, factor: int):
    """Keep the top-left point of every factor x factor block."""
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be 1, 2, 4 or 8, got {factor}")
    t = as_tensor(coord_map)
    h, w = t.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} map is not divisible by {factor}")
    if factor == 1:
        return t
    return Tensor(np.ascontiguousarray(t.data[..., ::factor, ::factor]))


class PlainSlot(Module):
    """The SAC slot with attention removed: conv -> between -> follow, + input."""

    def __init__(self, channels: int, rng, k: int = 3, between: Module | None = None):
        self.in_channels = self.out_channels = channels
        self.k = k
        self.main = Conv2d(channels, channels, k, rng)
        self.between = between
        self.follow = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor, coord_map=None, injected_attention=None) -> Tensor:
        y = self.main(x)
        if self.between is not None:
            y = self.between(y)
        return self.follow(y) + x

    def cost(self, hw):
        p, m, out = self.main.cost(hw)
        for extra in (self.between, self.follow):
            pe, me, out = extra.cost(out)
            p, m = p + pe, m + me
        return p, m, out, 0, 0


class Block(Module):
    def __init__(self, cfg: NetworkConfig, channels: int, rng):
        between = NormAct(channels, cfg.norm, cfg.slope)
        if cfg.uses_sac:
            self.slot = SacLayer(VARIANTS[cfg.sac_variant], channels, channels, rng, k=cfg.kernel_size,
                                 attention_kernel=cfg.attention_kernel,
                                 coord_channels=cfg.coord_channels, follow=True, between=between)
        else:
            self.slot = PlainSlot(channels, rng, cfg.kernel_size, between)
        self.act1 = NormAct(channels, cfg.norm, cfg.slope)
        self.conv = Conv2d(channels, channels, 3, rng)
        self.act2 = NormAct(channels, cfg.norm, cfg.slope)

    def forward(self, x: Tensor, coord_map: Tensor, injected_attention=None) -> Tensor:
        if callable(injected_attention):
            injected_attention = (injected_attention(self.slot)
                                  if isinstance(self.slot, SacLayer) else None)
        x = self.act1(self.slot(x, coord_map, injected_attention))
        return self.act2(self.conv(x))

    def layers(self):
        return [("slot", self.slot), ("act1", self.act1), ("conv", self.conv), ("act2", self.act2)]


class Stage(Module):
    def __init__(self, cfg: NetworkConfig, index: int, in_channels: int, rng):
        c = cfg.stage_channels[index]
        self.factor = RESOLUTION_FACTORS[index]
        self.transition = Conv2d(in_channels, c, 3, rng, stride=STAGE_STRIDES[index])
        self.transition_act = NormAct(c, cfg.norm, cfg.slope)
        self.blocks = [Block(cfg, c, rng) for _ in range(cfg.blocks_per_stage[index])]
        self.head = Conv2d(c, cfg.num_classes, 1, rng, gain=1.0) if index > 0 else None

    def forward(self, x: Tensor, coord_map: Tensor, injected_attention=None) -> Tensor:
        x = self.transition_act(self.transition(x))
        for block in self.blocks:
            x = block(x, coord_map, injected_attention)
        return x


class UpBlock(Module):
    def __init__(self, cfg: NetworkConfig, in_channels: int, skip_channels: int, out_channels: int, rng):
        self.up = ConvTranspose2d(in_channels, out_channels, rng)
        self.up_act = NormAct(out_channels, cfg.norm, cfg.slope)
        self.skip = (Conv2d(skip_channels, out_channels, 1, rng)
                     if skip_channels != out_channels else None)
        self.conv = Conv2d(out_channels, out_channels, 3, rng)
        self.act = NormAct(out_channels, cfg.norm, cfg.slope)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = self.up_act(self.up(x))
        x = x + (skip if self.skip is None else self.skip(skip))
        return self.act(self.conv(x))


class Network(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stages = []
        prev = cfg.in_channels
        for s in range(5):
            self.stages.append(Stage(cfg, s, prev, rng))
            prev = cfg.stage_channels[s]
        sc = cfg.stage_channels
        # skips come from stages 3, 2 and 1 (resolutions 1/4, 1/2, 1)
        skips = (sc[2], sc[1], sc[0])
        self.decoder = []
        for d, skip in zip(cfg.decoder_channels, skips):
            self.decoder.append(UpBlock(cfg, prev, skip, d, rng))
            prev = d
        self.final_head = Conv2d(prev, cfg.num_classes, 1, rng, gain=1.0)

    # -- inputs ---------------------------------------------------------------

    def prepare(self, features, mask=None) -> tuple[Tensor, Tensor]:
        """Normalise and mask features; returns (input, coordinate map)."""
        cfg = self.cfg
        x = np.asarray(features.data if isinstance(features, Tensor) else features,
                       dtype=get_default_dtype())
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"features must be (N, {cfg.in_channels}, H, W), got {x.shape}")
        if x.shape[2:] != cfg.input_hw:
            raise ShapeError(f"input size {x.shape[2:]} does not match configured {cfg.input_hw}")
        if cfg.feature_mean is not None:
            mean = np.asarray(cfg.feature_mean, dtype=x.dtype).reshape(1, -1, 1, 1)
            std = np.asarray(cfg.feature_std, dtype=x.dtype).reshape(1, -1, 1, 1)
            x = (x - mean) / std
        if mask is not None:
            m = np.asarray(mask, dtype=bool).reshape(x.shape[0], 1, *x.shape[2:])
            x = np.where(m, x, 0.0).astype(x.dtype)
        return Tensor(x), Tensor(np.ascontiguousarray(x[:, :cfg.coord_channels]))

    # -- forward --------------------------------------------------------------

    def forward(self, features, mask=None, heads: bool = True, injected_attention=None):
        """Returns (five StageOutputs, final full-resolution logits).

        ``injected_attention`` may be a callable ``(layer, shape) -> array`` or
        the string "ones"; it replaces every attention map in the network.
        """
        x, coords = self.prepare(features, mask)
        pyramid = {f: downsample_coord_map(coords, f) for f in sorted(set(RESOLUTION_FACTORS))}
        feats = []
        for stage in self.stages:
            att = _injector(injected_attention, pyramid[stage.factor], x.shape[0])
            x = stage(x, pyramid[stage.factor], att)
            feats.append(x)
        y = x
        for up, skip in zip(self.decoder, (feats[2], feats[1], feats[0])):
            y = up(y, skip)
        final = self.final_head(y)
        outputs = [StageOutput(feats[0], final, 1)]
        for s in range(1, 5):
            head = self.stages[s].head(feats[s]) if heads else None
            outputs.append(StageOutput(feats[s], head, RESOLUTION_FACTORS[s]))
        return outputs, final

    def sac_layers(self) -> list[SacLayer]:
        return [m for m in self.modules() if isinstance(m, SacLayer)]

    # -- accounting -----------------------------------------------------------

    def layer_costs(self) -> list[dict]:
        """Per-layer (name, params, MACs, extra params, extra MACs) at the configured input size."""
        rows = []
        hw = self.cfg.input_hw

        def add(name, layer, hw_in):
            res = layer.cost(hw_in)
            p, m, out = res[:3]
            ep, em = (res[3], res[4]) if len(res) > 3 else (0, 0)
            rows.append(dict(layer=name, params=p, macs=m, params_extra=ep, macs_extra=em))
            return out

        stage_hw = []
        for s, stage in enumerate(self.stages):
            hw = add(f"stage{s + 1}.transition", stage.transition, hw)
            hw = add(f"stage{s + 1}.transition_act", stage.transition_act, hw)
            for b, block in enumerate(stage.blocks):
                for name, layer in block.layers():
                    hw = add(f"stage{s + 1}.block{b}.{name}", layer, hw)
            stage_hw.append(hw)
        for s in range(1, 5):
            add(f"stage{s + 1}.head", self.stages[s].head, stage_hw[s])
        for d, up in enumerate(self.decoder):
            hw_in = hw
            hw = add(f"decoder{d}.up", up.up, hw_in)
            add(f"decoder{d}.up_act", up.up_act, hw)
            if up.skip is not None:
                add(f"decoder{d}.skip", up.skip, hw)
            add(f"decoder{d}.conv", up.conv, hw)
            add(f"decoder{d}.act", up.act, hw)
        add("final_head", self.final_head, hw)
        return rows


def _injector(spec, coords: Tensor, n: int):
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec != "ones":
            raise ValueError(f"unknown attention injection {spec!r}")
        h, w = coords.shape[2:]
        return lambda layer: np.ones((n, layer.attention_channels, h, w), dtype=coords.dtype)
    return spec


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, np.random.default_rng(seed))


def forward(net: Network, image, heads: bool = True, injected_attention=None):
    """Run ``net`` on a LidarImage or a list of them (stacked into one batch)."""
    images = image if isinstance(image, (list, tuple)) else [image]
    feats = np.concatenate([im.features for im in images], axis=0)
    mask = np.stack([im.mask for im in images])
    return net.forward(feats, mask, heads=heads, injected_attention=injected_attention)


def transplant(src: Network, dst: Network) -> None:
    """Copy every weight ``dst`` shares with ``src`` (attention convs are skipped)."""
    state = src.state_dict()
    dst.load_state_dict({k: v for k, v in state.items() if k in dict(dst.state_dict())})
