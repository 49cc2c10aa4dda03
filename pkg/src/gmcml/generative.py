"""Variational encoder/generator that maps a realistic image to a mask estimate.

Parameters live in a flat ``dict[str, Tensor]`` so the forward functions stay
pure: the same dict can be swapped, perturbed or serialised without touching
any module state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOGVAR_BOUND = 20.0
# Masks are mostly black background; starting the output logits near the
# typical mask mean keeps the sigmoid out of its flat tail on the first steps.
OUTPUT_BIAS_INIT = -2.5


@dataclass(frozen=True)
class GenerativeConfig:
    resolution: int = 32
    latent: int = 16
    channels: tuple[int, int, int] = (16, 32, 32)
    sigma: float = 0.1

    def __post_init__(self):
        if self.resolution % 8 or self.resolution < 8:
            raise ValueError(f"resolution must be a positive multiple of 8, got {self.resolution}")
        if self.latent < 1:
            raise ValueError("latent size must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def bottleneck(self) -> int:
        return self.resolution // 8

    @property
    def flat(self) -> int:
        return self.channels[2] * self.bottleneck**2


@dataclass
class LatentGaussian:
    mu: Tensor
    log_var: Tensor

    @property
    def k(self) -> int:
        return self.mu.shape[-1]


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 6.0) -> Tensor:
    bound = np.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def init_generative(cfg: GenerativeConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c1, c2, c3 = cfg.channels
    k = cfg.latent
    p = {
        "enc.conv1.w": _uniform(rng, (c1, 3, 3, 3), 27),
        "enc.conv1.b": _zeros(c1),
        "enc.conv2.w": _uniform(rng, (c2, c1, 3, 3), 9 * c1),
        "enc.conv2.b": _zeros(c2),
        "enc.conv3.w": _uniform(rng, (c3, c2, 3, 3), 9 * c2),
        "enc.conv3.b": _zeros(c3),
        "enc.mu.w": _uniform(rng, (cfg.flat, k), cfg.flat, 1.0),
        "enc.mu.b": _zeros(k),
        "enc.logvar.w": _uniform(rng, (cfg.flat, k), cfg.flat, 0.1),
        "enc.logvar.b": _zeros(k),
        "gen.fc.w": _uniform(rng, (k, cfg.flat), k),
        "gen.fc.b": _zeros(cfg.flat),
        "gen.conv1.w": _uniform(rng, (c2, c3, 3, 3), 9 * c3),
        "gen.conv1.b": _zeros(c2),
        "gen.conv2.w": _uniform(rng, (c1, c2, 3, 3), 9 * c2),
        "gen.conv2.b": _zeros(c1),
        "gen.conv3.w": _uniform(rng, (3, c1, 3, 3), 9 * c1, 1.0),
        "gen.conv3.b": Tensor(np.full(3, OUTPUT_BIAS_INIT), requires_grad=True),
    }
    for name, t in p.items():
        t.name = name
    return p


def _batched(x: Tensor, channels: int, resolution: int, what: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
        single = True
    else:
        single = False
    if x.ndim != 4 or x.shape[1:] != (channels, resolution, resolution):
        raise ValueError(f"{what} expects shape ({channels}, {resolution}, {resolution}), got {x.shape}")
    return x, single


def encode(params: dict[str, Tensor], x, cfg: GenerativeConfig) -> LatentGaussian:
    """Image (3, S, S) or batch (N, 3, S, S) to a diagonal Gaussian over z."""
    x, single = _batched(T._as_tensor(x), 3, cfg.resolution, "encode")
    h = x
    # each stage halves the extent: 3x3 conv, ReLU, 2x2 max pool
    for i in (1, 2, 3):
        h = T.max_pool2d(T.relu(T.conv2d(h, params[f"enc.conv{i}.w"], pad=1, bias=params[f"enc.conv{i}.b"])))
    h = T.reshape(h, (h.shape[0], cfg.flat))
    mu = T.linear(h, params["enc.mu.w"], params["enc.mu.b"])
    log_var = T.clamp(T.linear(h, params["enc.logvar.w"], params["enc.logvar.b"]), -LOGVAR_BOUND, LOGVAR_BOUND)
    if single:
        mu, log_var = T.reshape(mu, (cfg.latent,)), T.reshape(log_var, (cfg.latent,))
    return LatentGaussian(mu, log_var)


def sample_latent(g: LatentGaussian, eps) -> Tensor:
    """Reparameterised draw ``mu + exp(log_var / 2) * eps``."""
    eps = T._as_tensor(eps)
    if eps.shape != g.mu.shape:
        raise ValueError(f"eps shape {eps.shape} does not match latent shape {g.mu.shape}")
    return g.mu + T.exp(g.log_var * 0.5) * eps


def generate(params: dict[str, Tensor], z, cfg: GenerativeConfig) -> Tensor:
    """Latent (k,) or (N, k) to a mask estimate in [0, 1] of shape (…, 3, S, S)."""
    z = T._as_tensor(z)
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != cfg.latent:
        raise ValueError(f"generate expects latent length {cfg.latent}, got shape {z.shape}")
    b = cfg.bottleneck
    h = T.relu(T.linear(z, params["gen.fc.w"], params["gen.fc.b"]))
    h = T.reshape(h, (z.shape[0], cfg.channels[2], b, b))
    h = T.relu(T.conv2d(T.upsample2x(h), params["gen.conv1.w"], pad=1, bias=params["gen.conv1.b"]))
    h = T.relu(T.conv2d(T.upsample2x(h), params["gen.conv2.w"], pad=1, bias=params["gen.conv2.b"]))
    out = T.sigmoid(T.conv2d(T.upsample2x(h), params["gen.conv3.w"], pad=1, bias=params["gen.conv3.b"]))
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def _batch_count(t: Tensor, sample_ndim: int) -> int:
    return 1 if t.ndim == sample_ndim else t.shape[0]


def loss_enc(g: LatentGaussian) -> Tensor:
    """KL(N(mu, diag exp(log_var)) || N(0, I)); batches are averaged."""
    mu, lv = g.mu, g.log_var
    per = T.exp(lv) + T.square(mu) - lv - 1.0
    return T.tsum(per) * (0.5 / _batch_count(mu, 1))


def loss_gen(m_pred, m_true, sigma: float) -> Tensor:
    """Gaussian negative log-likelihood ``||M - M'||^2 / (2 sigma^2)``; batches are averaged."""
    m_pred, m_true = T._as_tensor(m_pred), T._as_tensor(m_true)
    if m_pred.shape != m_true.shape:
        raise ValueError(f"shape mismatch: {m_pred.shape} vs {m_true.shape}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    diff = m_true - m_pred
    return T.tsum(T.square(diff)) * (1.0 / (2.0 * sigma * sigma) / _batch_count(m_pred, 3))


def loss_enc_gen(g: LatentGaussian, m_pred, m_true, sigma: float) -> Tensor:
    return loss_enc(g) + loss_gen(m_pred, m_true, sigma)


def mosaic(images: np.ndarray, grid: int) -> np.ndarray:
    """Tile ``grid**2`` images of shape (3, S, S) into (grid*S, grid*S, 3)."""
    imgs = np.asarray(images)
    s = imgs.shape[-1]
    tiles = imgs.reshape(grid, grid, 3, s, s).transpose(0, 3, 1, 4, 2)
    return tiles.reshape(grid * s, grid * s, 3)


def sample_manifold(
    params: dict[str, Tensor],
    cfg: GenerativeConfig,
    center,
    span: float,
    grid: int,
    dims: tuple[int, int] = (0, 1),
) -> np.ndarray:
    """Decode a grid of latents over a 2-D slice through ``center``.

    Row ``r``, column ``c`` decodes ``center`` with ``dims`` offset by
    ``linspace(-span, span, grid)``. Returns a (grid*S, grid*S, 3) mosaic.
    """
    if grid < 2:
        raise ValueError("grid must be at least 2")
    if span < 0:
        raise ValueError("span must be non-negative")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (cfg.latent,):
        raise ValueError(f"center must have length {cfg.latent}")
    offsets = np.linspace(-span, span, grid)
    zs = np.repeat(center[None], grid * grid, axis=0)
    rr, cc = np.meshgrid(offsets, offsets, indexing="ij")
    zs[:, dims[0]] += rr.reshape(-1)
    zs[:, dims[1]] += cc.reshape(-1)
    with T.no_grad():
        out = generate(params, Tensor(zs), cfg).data
    return mosaic(out, grid)
