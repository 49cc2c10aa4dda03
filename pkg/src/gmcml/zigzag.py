"""Compact classifier built from Zigzag micro-modules.

A Zigzag module squeezes its input with a linear 1x1 projection, expands the
squeezed map through parallel 1x1 and 3x3 branches, adds a 1x1 bypass of the
module input and applies a single ReLU after the sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ZigzagModuleConfig:
    in_channels: int
    squeeze_channels: int
    expand1_channels: int
    expand3_channels: int
    bypass_channels: int

    def __post_init__(self):
        for name in ("in_channels", "squeeze_channels", "expand1_channels", "expand3_channels", "bypass_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bypass_channels != self.expand1_channels + self.expand3_channels:
            raise ValueError(
                f"bypass_channels ({self.bypass_channels}) must equal expand1 + expand3 "
                f"({self.expand1_channels} + {self.expand3_channels})"
            )
        if self.squeeze_channels >= self.in_channels:
            raise ValueError(
                f"squeeze_channels ({self.squeeze_channels}) must be below in_channels ({self.in_channels})"
            )

    @property
    def out_channels(self) -> int:
        return self.bypass_channels

    @classmethod
    def build(cls, in_channels: int, out_channels: int, squeeze_ratio: int = 4) -> "ZigzagModuleConfig":
        half = out_channels // 2
        return cls(in_channels, max(1, out_channels // squeeze_ratio), half, out_channels - half, out_channels)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_zigzag_module(cfg: ZigzagModuleConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    sq = cfg.squeeze_channels
    p = {
        "squeeze.w": _uniform(rng, (sq, cfg.in_channels, 1, 1), cfg.in_channels),
        "squeeze.b": Tensor(np.zeros(sq), requires_grad=True),
        "expand1.w": _uniform(rng, (cfg.expand1_channels, sq, 1, 1), sq),
        "expand1.b": Tensor(np.zeros(cfg.expand1_channels), requires_grad=True),
        "expand3.w": _uniform(rng, (cfg.expand3_channels, sq, 3, 3), 9 * sq),
        "expand3.b": Tensor(np.zeros(cfg.expand3_channels), requires_grad=True),
        "bypass.w": _uniform(rng, (cfg.bypass_channels, cfg.in_channels, 1, 1), cfg.in_channels),
        "bypass.b": Tensor(np.zeros(cfg.bypass_channels), requires_grad=True),
    }
    return {prefix + k: v for k, v in p.items()}


def zigzag_module(x, cfg: ZigzagModuleConfig, params: dict[str, Tensor], prefix: str = "") -> Tensor:
    """Apply one module to (C, H, W) or (N, C, H, W); spatial size is preserved."""
    x = T._as_tensor(x)
    channels = x.shape[-3] if x.ndim >= 3 else None
    if channels != cfg.in_channels:
        raise ValueError(f"zigzag module expects {cfg.in_channels} input channels, got shape {x.shape}")
    axis = 0 if x.ndim == 3 else 1
    s = T.conv2d(x, params[prefix + "squeeze.w"], bias=params[prefix + "squeeze.b"])
    e1 = T.conv2d(s, params[prefix + "expand1.w"], bias=params[prefix + "expand1.b"])
    e3 = T.conv2d(s, params[prefix + "expand3.w"], pad=1, bias=params[prefix + "expand3.b"])
    bypass = T.conv2d(x, params[prefix + "bypass.w"], bias=params[prefix + "bypass.b"])
    return T.relu(T.concat([e1, e3], axis=axis) + bypass)


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int = 12
    in_channels: int = 6
    stem_channels: int = 16
    widths: tuple[int, ...] = (32, 64, 64)
    squeeze_ratio: int = 4

    @property
    def descriptor_size(self) -> int:
        return self.widths[-1]

    def modules(self) -> list[ZigzagModuleConfig]:
        cfgs, c = [], self.stem_channels
        for w in self.widths:
            cfgs.append(ZigzagModuleConfig.build(c, w, self.squeeze_ratio))
            c = w
        return cfgs


def init_classifier(cfg: ClassifierConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {
        "stem.w": _uniform(rng, (cfg.stem_channels, cfg.in_channels, 3, 3), 9 * cfg.in_channels),
        "stem.b": Tensor(np.zeros(cfg.stem_channels), requires_grad=True),
    }
    for i, mcfg in enumerate(cfg.modules()):
        p.update(init_zigzag_module(mcfg, rng, prefix=f"zz{i}."))
    d = cfg.descriptor_size
    bound = np.sqrt(1.0 / d)
    p["fc.w"] = Tensor(rng.uniform(-bound, bound, size=(d, cfg.num_classes)), requires_grad=True)
    p["fc.b"] = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    for name, t in p.items():
        t.name = name
    return p


def classifier_forward(x6, params: dict[str, Tensor], cfg: ClassifierConfig) -> tuple[Tensor, Tensor]:
    """Six-channel input to ``(descriptor, logits)``.

    Accepts (6, S, S) or (N, 6, S, S); the descriptor is the global-average
    pooled output of the last module.
    """
    x = T._as_tensor(x6)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"classifier expects {cfg.in_channels} input channels, got shape {T._as_tensor(x6).shape}")
    h = T.relu(T.conv2d(x, params["stem.w"], pad=1, bias=params["stem.b"]))
    mods = cfg.modules()
    for i, mcfg in enumerate(mods):
        h = zigzag_module(h, mcfg, params, prefix=f"zz{i}.")
        if i < len(mods) - 1:
            h = T.max_pool2d(h)
    desc = T.global_avg_pool(h)
    logits = T.linear(desc, params["fc.w"], params["fc.b"])
    if single:
        desc = T.reshape(desc, (desc.shape[1],))
        logits = T.reshape(logits, (logits.shape[1],))
    return desc, logits


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))
