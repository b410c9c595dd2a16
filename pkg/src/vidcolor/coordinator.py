"""Coordinator network that turns the frozen text-to-latent denoiser into a
grayscale- and reference-conditioned one.

The coordinator trunk mirrors the base U-Net at half width. Its input is the
noisy latent plus encoded grayscale features; at each resolution a color
propagation attention looks up reference colors by matching the current
grayscale features against the reference grayscale features. The trunk's
per-site features are injected into the base forward pass through
``outer_1x1(concat(F_base, inner_1x1(F_coord)))`` projections that start as
``[identity | 0]``, so an untrained coordinator leaves the base untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .autoencoder import Autoencoder
from .checkpoint import FrozenWeightError, ParamStore, check_unchanged, module_hash
from .diffusion import (
    CAPTION_DROP,
    NULL_TOKEN,
    Denoiser,
    NoiseSchedule,
    ShapeError,
    UNetConfig,
    UNetTrunk,
    _warmup_cosine,
    add_noise,
    diffusion_loss,
    repeat_tokens,
)
from .training import DivergenceGuard, LossLog, log_progress, torch_generator

log = logging.getLogger(__name__)

REFERENCE_DROP = 0.1


def color_propagation_attention(gray_cur: torch.Tensor, gray_ref: torch.Tensor, color_ref: torch.Tensor,
                                w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
                                return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V over flattened spatial positions.

    Q, K and V project (channel-wise) the current grayscale, reference
    grayscale and reference color features, all shaped (B, C, H, W). Weight
    matrices are (d_k, C), (d_k, C) and (C_v, C). Returns (B, C_v, H, W).
    """
    if not (gray_cur.shape == gray_ref.shape == color_ref.shape):
        raise ShapeError(
            f"feature maps differ: {tuple(gray_cur.shape)}, {tuple(gray_ref.shape)}, {tuple(color_ref.shape)}"
        )
    b, c, h, w = gray_cur.shape
    if w_q.shape[1] != c or w_k.shape[1] != c or w_v.shape[1] != c or w_q.shape[0] != w_k.shape[0]:
        raise ShapeError("projection weights do not match feature channels")
    flat = lambda x: x.reshape(b, c, h * w).transpose(1, 2)  # noqa: E731
    q = flat(gray_cur) @ w_q.T
    k = flat(gray_ref) @ w_k.T
    v = flat(color_ref) @ w_v.T
    attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(w_q.shape[0]), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, w_v.shape[0], h, w)
    return (out, attn) if return_weights else out


class ColorPropagationAttention(nn.Module):
    def __init__(self, channels: int, key_dim: int | None = None):
        super().__init__()
        d = key_dim or channels
        self.w_q = nn.Parameter(torch.randn(d, channels) / math.sqrt(channels))
        self.w_k = nn.Parameter(torch.randn(d, channels) / math.sqrt(channels))
        self.w_v = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))

    def forward(self, gray_cur, gray_ref, color_ref):
        return color_propagation_attention(gray_cur, gray_ref, color_ref, self.w_q, self.w_k, self.w_v)


def inject_features(base_feature: torch.Tensor, adapter_feature: torch.Tensor,
                    inner: nn.Conv2d, outer: nn.Conv2d) -> torch.Tensor:
    projected = inner(adapter_feature)
    if projected.shape[2:] != base_feature.shape[2:] or projected.shape[0] != base_feature.shape[0]:
        raise ShapeError(f"adapter feature {tuple(projected.shape)} misaligned with {tuple(base_feature.shape)}")
    return outer(torch.cat([base_feature, projected], dim=1))


class Injection(nn.Module):
    def __init__(self, base_channels: int, adapter_channels: int):
        super().__init__()
        self.inner = nn.Conv2d(adapter_channels, base_channels, 1)
        self.outer = nn.Conv2d(2 * base_channels, base_channels, 1)
        with torch.no_grad():
            self.outer.weight.zero_()
            self.outer.weight[:, :base_channels, 0, 0] = torch.eye(base_channels)
            self.outer.bias.zero_()

    def forward(self, base_feature, adapter_feature):
        return inject_features(base_feature, adapter_feature, self.inner, self.outer)


def _site_channels(cfg: UNetConfig) -> dict[str, int]:
    c0, c1 = cfg.channels
    return {"down0": c0, "down1": c1, "mid": c1, "up1": c1, "up0": c0}


class Coordinator(nn.Module):
    def __init__(self, base_cfg: UNetConfig = UNetConfig()):
        super().__init__()
        cfg = base_cfg.halved()
        self.base_cfg = base_cfg
        self.cfg = cfg
        c0, c1 = cfg.channels
        # Grayscale frames (4x latent resolution) → latent-resolution features.
        self.cond_encoder = nn.Sequential(
            nn.Conv2d(1, c0, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        )
        self.ref_encoder = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.gray_down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.color_down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.attn0 = ColorPropagationAttention(c0)
        self.attn1 = ColorPropagationAttention(c1)
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.trunk = UNetTrunk(cfg)
        base_ch, own_ch = _site_channels(base_cfg), _site_channels(cfg)
        self.injections = nn.ModuleDict({s: Injection(base_ch[s], own_ch[s]) for s in base_ch})

    def features(self, z_t, t, ctx, g, g_ref, z_ref) -> dict[str, torch.Tensor]:
        gc0, gr0 = self.cond_encoder(g), self.cond_encoder(g_ref)
        cr0 = self.ref_encoder(z_ref)
        if gc0.shape[2:] != z_t.shape[2:]:
            raise ShapeError(f"grayscale features {tuple(gc0.shape[2:])} vs latent {tuple(z_t.shape[2:])}")
        gc1, gr1, cr1 = self.gray_down(gc0), self.gray_down(gr0), self.color_down(cr0)
        conds = {"down0": (gc0, gr0, cr0, self.attn0), "down1": (gc1, gr1, cr1, self.attn1)}

        def pre(site, h):
            cur, ref, color, attn = conds[site]
            return h + cur + attn(cur, ref, color)

        feats: dict[str, torch.Tensor] = {}

        def post(site, h):
            feats[site] = h
            return h

        emb = self.trunk.embed_time(t, z_t.dtype)
        self.trunk(self.conv_in(z_t), emb, ctx, pre=pre, post=post)
        return feats

    def param_store(self, base: Denoiser) -> ParamStore:
        return ParamStore.from_module(self, meta={
            "config": self.base_cfg.to_meta(), "kind": b"coordinator",
            "base_hash": module_hash(base).encode(),
        })

    @classmethod
    def from_store(cls, store: ParamStore, base: Denoiser) -> "Coordinator":
        expected = store.meta.get("base_hash", b"").decode()
        actual = module_hash(base)
        if expected != actual:
            raise FrozenWeightError(f"coordinator was trained against base {expected}, got {actual}")
        return store.load_into(cls(UNetConfig.from_meta(store.meta["config"])))


class ConditionalDenoiser(nn.Module):
    """epsilon_theta(z_t, t, text, g, g_ref, z_ref) = base run with coordinator injections."""

    def __init__(self, base: Denoiser, coordinator: Coordinator):
        super().__init__()
        self.base = base
        self.coordinator = coordinator
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, z_t, t, tokens, g, g_ref, z_ref):
        if z_ref.shape != z_t.shape:
            raise ShapeError(f"reference latent {tuple(z_ref.shape)} vs z_t {tuple(z_t.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        ctx = self.base.embed_tokens(tokens)
        feats = self.coordinator.features(z_t, t, ctx, g, g_ref, z_ref)
        inj = self.coordinator.injections
        return self.base(z_t, t, tokens, inject=lambda site, h: inj[site](h, feats[site]))


def _latent_tensor(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x, dtype=np.float32).transpose(2, 0, 1)))[None]


@torch.no_grad()
def conditional_denoise(z_t, t: int, caption, g, g_ref, z_ref, base: Denoiser, coordinator: Coordinator) -> np.ndarray:
    """Single-frame epsilon-hat; latents (h, w, c), grayscale frames (H, W, 1).

    ``z_ref`` (and ``g_ref``) may be all zeros for "no reference".
    """
    model = ConditionalDenoiser(base, coordinator)
    out = model(_latent_tensor(z_t), torch.tensor([int(t)]), repeat_tokens(caption, 1),
                _latent_tensor(g), _latent_tensor(g_ref), _latent_tensor(z_ref))
    return out[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# Training


@dataclass
class CoordinatorTrainConfig:
    steps: int = 6000
    stage1_fraction: float = 0.5
    batch_size: int = 32
    lr: float = 1e-3
    caption_drop: float = CAPTION_DROP
    reference_drop: float = REFERENCE_DROP
    max_gap: int = 2
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    ema_decay: float = 0.999


def sample_pairs(gen: torch.Generator, clips: int, frames: int, batch: int, max_gap: int):
    """(clip, frame, reference frame) triples; references are 1..max_gap frames away on either side."""
    c = torch.randint(clips, (batch,), generator=gen)
    i = torch.randint(frames, (batch,), generator=gen)
    gap = torch.randint(1, max_gap + 1, (batch,), generator=gen)
    sign = torch.where(torch.rand(batch, generator=gen) < 0.5, -1, 1)
    j = i + sign * gap
    flip = (j < 0) | (j >= frames)
    j = torch.where(flip, i - sign * gap, j).clamp(0, frames - 1)
    return c, i, j


def train_coordinator(latents: torch.Tensor, grays: torch.Tensor, tokens: torch.Tensor, base: Denoiser,
                      schedule: NoiseSchedule, cfg: CoordinatorTrainConfig = CoordinatorTrainConfig(),
                      autoencoder: Autoencoder | None = None) -> tuple[Coordinator, LossLog]:
    """Fit the coordinator on clips: latents (C, N, c, h, w), grays (C, N, 1, H, W), tokens (C, L).

    Stage 1 conditions on clean reference latents, stage 2 on references
    noised to the target's timestep (with independent noise). Base (and the
    autoencoder, if given) must come out bit-identical.
    """
    torch.manual_seed(cfg.seed)
    base_hash = module_hash(base)
    ae_hash = module_hash(autoencoder) if autoencoder is not None else None
    coord = Coordinator(base.cfg)
    model = ConditionalDenoiser(base, coord)
    gen = torch_generator(cfg.seed, "train_coordinator")
    opt = torch.optim.AdamW(coord.parameters(), lr=cfg.lr, weight_decay=0.0)
    ema = None
    if cfg.ema_decay:
        from .diffusion import EMA

        ema = EMA(coord, cfg.ema_decay)
    guard = DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    losses = LossLog()
    n_clips, n_frames = latents.shape[:2]
    stage1 = int(round(cfg.steps * cfg.stage1_fraction))
    null = torch.full_like(tokens[:1], NULL_TOKEN)
    for step in range(cfg.steps):
        _warmup_cosine(opt, cfg.lr, step, cfg.steps)
        c, i, j = sample_pairs(gen, n_clips, n_frames, cfg.batch_size, cfg.max_gap)
        z0, zr = latents[c, i], latents[c, j]
        g, gr = grays[c, i], grays[c, j]
        tok = tokens[c].clone()
        tok[torch.rand(cfg.batch_size, generator=gen) < cfg.caption_drop] = null
        keep = (torch.rand(cfg.batch_size, generator=gen) >= cfg.reference_drop).float()
        t = torch.randint(1, schedule.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        zt = add_noise(z0, eps, t, schedule)
        if step >= stage1:
            zr = add_noise(zr, torch.randn(zr.shape, generator=gen), t, schedule)
        zr = zr * keep[:, None, None, None]
        gr = gr * keep[:, None, None, None]
        loss = diffusion_loss(eps, model(zt, t, tok, g, gr, zr))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update(coord)
        value = float(loss.detach())
        losses.append(value)
        guard.update(step, value)
        log_progress("coordinator", step, cfg.steps, value)
    if ema is not None:
        ema.copy_to(coord)
    check_unchanged(base_hash, base, "base denoiser")
    if autoencoder is not None:
        check_unchanged(ae_hash, autoencoder, "autoencoder")
    coord.eval()
    return coord, losses
