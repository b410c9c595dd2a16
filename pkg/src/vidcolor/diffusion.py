"""Text-conditioned latent denoiser (the frozen base model), its noise
schedule and epsilon-prediction training.

Timesteps are 1-based: ``schedule.alpha_bar[0] == 1`` is the clean latent
and ``schedule.alpha_bar[T]`` the noisiest level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ParamStore
from .config import format_config, parse_config
from .nn_blocks import CrossAttention, Downsample, ResBlock, Upsample, num_groups, timestep_embedding
from .toy_data import VOCABULARY
from .training import DivergenceGuard, LossLog, log_progress, torch_generator

log = logging.getLogger(__name__)

CAPTION_DROP = 0.5
MAX_TOKENS = 8
NULL_TOKEN = 0
SITES = ("down0", "down1", "mid", "up1", "up0")


class VocabularyError(ValueError):
    pass


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed 0..S (index 0 is the clean level).

    ``model_t[s]`` is the training timestep the network sees at step ``s``;
    it equals ``s`` for a full schedule and differs for strided ones.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray
    model_t: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def posterior_variance(self, t: int) -> float:
        """beta-tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
        return float((1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.betas[t])

    def strided(self, steps: int) -> "NoiseSchedule":
        """Evenly strided sub-schedule with ``steps`` steps ending at timestep T."""
        if not 2 <= steps <= self.T:
            raise ValueError(f"strided steps must be in [2, {self.T}], got {steps}")
        taus = np.round(np.arange(1, steps + 1) * self.T / steps).astype(np.int64)
        abar = np.concatenate([[1.0], self.alpha_bar[taus]])
        betas = np.concatenate([[0.0], 1.0 - abar[1:] / abar[:-1]])
        return NoiseSchedule(betas, abar, np.concatenate([[0], self.model_t[taus]]))


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    if T < 2 or not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError(f"invalid schedule arguments T={T}, beta in [{beta_min}, {beta_max}]")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bar, np.arange(T + 1))


def add_noise(z0, eps, t, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` scalar or per-batch-item."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    if isinstance(z0, torch.Tensor):
        abar = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)[torch.as_tensor(t)]
        abar = abar.to(z0.dtype)
        if abar.ndim:
            abar = abar.reshape(-1, *([1] * (z0.ndim - 1)))
        return abar.sqrt() * z0 + (1 - abar).sqrt() * eps
    abar = np.asarray(schedule.alpha_bar)[np.asarray(t)]
    if np.ndim(abar):
        abar = abar.reshape(-1, *([1] * (np.ndim(z0) - 1)))
    return np.sqrt(abar) * z0 + np.sqrt(1 - abar) * eps


# ---------------------------------------------------------------------------
# Text


_TOKEN_IDS = {w: i for i, w in enumerate(VOCABULARY)}


def tokenize(caption) -> list[int]:
    """Whitespace-split caption (or token list) → ids; empty → [NULL_TOKEN]."""
    words = caption.split() if isinstance(caption, str) else list(caption)
    ids = []
    for w in words:
        if w not in _TOKEN_IDS or _TOKEN_IDS[w] == NULL_TOKEN:
            raise VocabularyError(f"unknown token {w!r}")
        ids.append(_TOKEN_IDS[w])
    if len(ids) > MAX_TOKENS:
        raise VocabularyError(f"caption has {len(ids)} tokens, max {MAX_TOKENS}")
    return ids or [NULL_TOKEN]


def pad_tokens(ids: list[int]) -> list[int]:
    return ids + [NULL_TOKEN] * (MAX_TOKENS - len(ids))


def token_batch(captions) -> torch.Tensor:
    """Padded id rows (B, MAX_TOKENS) for a list of captions."""
    return torch.tensor([pad_tokens(tokenize(c)) for c in captions], dtype=torch.long)


def repeat_tokens(caption, batch: int) -> torch.Tensor:
    return token_batch([caption]).expand(batch, -1).clone()


# ---------------------------------------------------------------------------
# Networks


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple[int, int] = (32, 64)
    latent_channels: int = 4
    time_dim: int = 64
    text_dim: int = 32
    vocab_size: int = len(VOCABULARY)
    groups: int = 8

    @property
    def emb_dim(self) -> int:
        return 4 * self.channels[0]

    def to_meta(self) -> bytes:
        return format_config({
            "channels": ",".join(map(str, self.channels)),
            "latent_channels": self.latent_channels,
            "time_dim": self.time_dim,
            "text_dim": self.text_dim,
            "vocab_size": self.vocab_size,
            "groups": self.groups,
        }).encode()

    @classmethod
    def from_meta(cls, blob: bytes) -> "UNetConfig":
        d = parse_config(blob.decode())
        return cls(tuple(int(c) for c in d["channels"].split(",")), int(d["latent_channels"]),
                   int(d["time_dim"]), int(d["text_dim"]), int(d["vocab_size"]), int(d["groups"]))

    def halved(self) -> "UNetConfig":
        return UNetConfig(tuple(c // 2 for c in self.channels), self.latent_channels, self.time_dim,
                          self.text_dim, self.vocab_size, self.groups)


class UNetTrunk(nn.Module):
    """Two-level U-Net body with text cross-attention at the bottleneck.

    ``pre(site, h)`` may add inputs before the down blocks; ``post(site, h)``
    sees (and may replace) every site's output. The coordinator uses the
    former to feed condition features and the latter both to collect its own
    features and to inject them into the base model.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        c0, c1 = cfg.channels
        e, g = cfg.emb_dim, cfg.groups
        self.cfg = cfg
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, e), nn.SiLU(), nn.Linear(e, e))
        self.down0 = ResBlock(c0, c0, e, g)
        self.downsample = Downsample(c0, c1)
        self.down1 = ResBlock(c1, c1, e, g)
        self.mid1 = ResBlock(c1, c1, e, g)
        self.mid_attn = CrossAttention(c1, cfg.text_dim, g)
        self.mid2 = ResBlock(c1, c1, e, g)
        self.up1 = ResBlock(2 * c1, c1, e, g)
        self.upsample = Upsample(c1, c0)
        self.up0 = ResBlock(2 * c0, c0, e, g)

    def embed_time(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(dtype))

    def forward(self, h, emb, ctx, pre=None, post=None):
        post = post or (lambda site, x: x)
        if pre is not None:
            h = pre("down0", h)
        h = post("down0", self.down0(h, emb))
        s0 = h
        h = self.downsample(h)
        if pre is not None:
            h = pre("down1", h)
        h = post("down1", self.down1(h, emb))
        s1 = h
        h = self.mid2(self.mid_attn(self.mid1(h, emb), ctx), emb)
        h = post("mid", h)
        h = post("up1", self.up1(torch.cat([h, s1], dim=1), emb))
        h = self.upsample(h)
        h = post("up0", self.up0(torch.cat([h, s0], dim=1), emb))
        return h


class Denoiser(nn.Module):
    """Base epsilon-predictor: conv_in → trunk → GN/SiLU/conv_out, plus the token embedding."""

    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.channels[0]
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.trunk = UNetTrunk(cfg)
        self.norm_out = nn.GroupNorm(num_groups(c0, cfg.groups), c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(tokens)

    def forward(self, z: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor, inject=None) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"expected (B, {self.cfg.latent_channels}, h, w) latents, got {tuple(z.shape)}")
        if z.shape[2] % 2 or z.shape[3] % 2:
            raise ShapeError(f"latent dims must be even, got {tuple(z.shape[2:])}")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        emb = self.trunk.embed_time(t, z.dtype)
        ctx = self.embed_tokens(tokens)
        h = self.trunk(self.conv_in(z), emb, ctx, post=inject)
        return self.conv_out(F.silu(self.norm_out(h)))

    def param_store(self) -> ParamStore:
        return ParamStore.from_module(self, meta={"config": self.cfg.to_meta(), "kind": b"denoiser"})

    @classmethod
    def from_store(cls, store: ParamStore) -> "Denoiser":
        return store.load_into(cls(UNetConfig.from_meta(store.meta["config"])))


def embed_text(caption, params: Denoiser) -> torch.Tensor:
    """Embedding rows for the caption's tokens (one null row for an empty caption)."""
    ids = torch.tensor(tokenize(caption), dtype=torch.long)
    with torch.no_grad():
        return params.embed_tokens(ids).clone()


@torch.no_grad()
def base_denoise(z_t: np.ndarray, t: int, caption, params: Denoiser) -> np.ndarray:
    """epsilon-hat for one (h, w, c) latent at training timestep t."""
    z = torch.from_numpy(np.ascontiguousarray(np.asarray(z_t, dtype=np.float32).transpose(2, 0, 1)))[None]
    out = params(z, torch.tensor([int(t)]), repeat_tokens(caption, 1))
    return out[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# Training


@dataclass
class BaseTrainConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    caption_drop: float = CAPTION_DROP
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    ema_decay: float = 0.999


def _warmup_cosine(opt, base_lr, step, steps, warmup=200):
    if step < warmup:
        lr = base_lr * (step + 1) / warmup
    else:
        lr = base_lr * 0.5 * (1 + np.cos(np.pi * (step - warmup) / max(1, steps - warmup)))
    for group in opt.param_groups:
        group["lr"] = lr


class EMA:
    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def copy_to(self, model: nn.Module) -> None:
        model.load_state_dict(self.shadow)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared noise-prediction error."""
    return ((eps - eps_hat) ** 2).mean()


def train_base(latents: torch.Tensor, tokens: torch.Tensor, schedule: NoiseSchedule,
               cfg: BaseTrainConfig = BaseTrainConfig(),
               arch: UNetConfig = UNetConfig()) -> tuple[Denoiser, LossLog]:
    """Epsilon-prediction training on latents (M, c, h, w) with per-latent token rows (M, L)."""
    torch.manual_seed(cfg.seed)
    model = Denoiser(arch)
    gen = torch_generator(cfg.seed, "train_base")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    ema = EMA(model, cfg.ema_decay) if cfg.ema_decay else None
    guard = DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    losses = LossLog()
    null = torch.full_like(tokens[:1], NULL_TOKEN)
    for step in range(cfg.steps):
        _warmup_cosine(opt, cfg.lr, step, cfg.steps)
        idx = torch.randint(len(latents), (cfg.batch_size,), generator=gen)
        z0 = latents[idx]
        tok = tokens[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.caption_drop
        tok[drop] = null
        t = torch.randint(1, schedule.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        zt = add_noise(z0, eps, t, schedule)
        loss = diffusion_loss(eps, model(zt, t, tok))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update(model)
        value = float(loss.detach())
        losses.append(value)
        guard.update(step, value)
        log_progress("base", step, cfg.steps, value)
    if ema is not None:
        ema.copy_to(model)
    model.eval()
    return model, losses
