"""Latent autoencoder (4x downsampling, 4 latent channels) and the video
decoder that adds grayscale shortcuts and temporal convolutions on top of the
frozen per-frame decoder.

Tensors are NCHW inside the networks; the public helpers :func:`encode`,
:func:`decode` and :func:`decode_video` take channel-last numpy arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ParamStore, check_unchanged, module_hash
from .config import format_config, parse_config
from .frames_io import GRAY_WEIGHTS, FrameSequence
from .nn_blocks import Downsample, ResBlock, Upsample, num_groups
from .rng import keyed_generator
from .training import DivergenceGuard, LossLog, log_progress, torch_generator

log = logging.getLogger(__name__)

LAMBDA_PERCEPTUAL = 0.1
DOWNSAMPLE = 4


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AEConfig:
    widths: tuple[int, ...] = (16, 32, 64)  # full, half and quarter resolution
    latent_channels: int = 4
    groups: int = 8

    def to_meta(self) -> bytes:
        return format_config({"widths": ",".join(map(str, self.widths)),
                              "latent_channels": self.latent_channels,
                              "groups": self.groups}).encode()

    @classmethod
    def from_meta(cls, blob: bytes) -> "AEConfig":
        d = parse_config(blob.decode())
        return cls(tuple(int(w) for w in d["widths"].split(",")), int(d["latent_channels"]), int(d["groups"]))


class Encoder(nn.Module):
    """Three-level convolutional encoder.

    ``features`` returns the post-residual feature map at every resolution
    (full, half, quarter), which is what the grayscale shortcut encoder needs.
    """

    def __init__(self, in_channels: int, cfg: AEConfig, out_channels: int | None = None):
        super().__init__()
        w = cfg.widths
        self.conv_in = nn.Conv2d(in_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(c, c, groups=cfg.groups) for c in w])
        self.downs = nn.ModuleList([Downsample(w[i], w[i + 1]) for i in range(len(w) - 1)])
        self.head = None
        if out_channels is not None:
            self.head_norm = nn.GroupNorm(num_groups(w[-1], cfg.groups), w[-1])
            self.head = nn.Conv2d(w[-1], out_channels, 3, padding=1)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.conv_in(x)
        feats = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        return self.head(F.silu(self.head_norm(h)))


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`. ``hook(level, h)`` runs after each residual block."""

    def __init__(self, cfg: AEConfig, out_channels: int = 3):
        super().__init__()
        w = tuple(reversed(cfg.widths))
        self.widths = w
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(c, c, groups=cfg.groups) for c in w])
        self.ups = nn.ModuleList([Upsample(w[i], w[i + 1]) for i in range(len(w) - 1)])
        self.norm_out = nn.GroupNorm(num_groups(w[-1], cfg.groups), w[-1])
        self.conv_out = nn.Conv2d(w[-1], out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, hook=None) -> torch.Tensor:
        h = self.conv_in(z)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if hook is not None:
                h = hook(i, h)
            if i < len(self.ups):
                h = self.ups[i](h)
        # Raw output; clamping happens only at inference so training keeps gradients.
        return self.conv_out(F.silu(self.norm_out(h)))


class Autoencoder(nn.Module):
    """Encoder E and decoder D with a per-channel latent normalization.

    ``latent_shift``/``latent_scale`` map raw encoder output to roughly unit
    variance latents, the space the diffusion models operate in.
    """

    def __init__(self, cfg: AEConfig = AEConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(3, cfg, out_channels=cfg.latent_channels)
        self.decoder = Decoder(cfg)
        self.register_buffer("latent_shift", torch.zeros(cfg.latent_channels))
        self.register_buffer("latent_scale", torch.ones(cfg.latent_channels))

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        _check_pixels(x)
        raw = self.encoder(x)
        return (raw - self.latent_shift[:, None, None]) * self.latent_scale[:, None, None]

    def decode_raw(self, z: torch.Tensor, hook=None) -> torch.Tensor:
        raw = z / self.latent_scale[:, None, None] + self.latent_shift[:, None, None]
        return self.decoder(raw, hook=hook)

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.cfg.latent_channels)
        return self.decode_raw(z).clamp(0.0, 1.0)

    @torch.no_grad()
    def fit_latent_normalization(self, frames: torch.Tensor, batch: int = 256) -> None:
        raws = torch.cat([self.encoder(frames[i : i + batch]) for i in range(0, len(frames), batch)])
        self.latent_shift.copy_(raws.mean(dim=(0, 2, 3)))
        self.latent_scale.copy_(1.0 / raws.std(dim=(0, 2, 3)).clamp_min(1e-6))

    def param_store(self) -> ParamStore:
        return ParamStore.from_module(self, meta={"config": self.cfg.to_meta(), "kind": b"autoencoder"})

    @classmethod
    def from_store(cls, store: ParamStore) -> "Autoencoder":
        model = cls(AEConfig.from_meta(store.meta["config"]))
        return store.load_into(model)


def _check_pixels(x: torch.Tensor, channels: int = 3) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"expected (B, {channels}, H, W) frames, got {tuple(x.shape)}")
    if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
        raise ShapeError(f"frame dims must be divisible by {DOWNSAMPLE}, got {tuple(x.shape[2:])}")


def _check_latent(z: torch.Tensor, channels: int) -> None:
    if z.ndim != 4 or z.shape[1] != channels:
        raise ShapeError(f"expected (B, {channels}, h, w) latents, got {tuple(z.shape)}")


def to_nchw(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(…, H, W, C) numpy → (B, C, H, W) tensor."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().permute(0, 2, 3, 1).numpy()


def gray_tensor(rgb: torch.Tensor) -> torch.Tensor:
    """BT.601 luminance of a (B, 3, H, W) tensor as (B, 1, H, W)."""
    w = torch.as_tensor(GRAY_WEIGHTS, dtype=rgb.dtype)
    return (rgb * w[None, :, None, None]).sum(dim=1, keepdim=True).clamp(0.0, 1.0)


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@torch.no_grad()
def encode(ae: Autoencoder, frame: np.ndarray) -> np.ndarray:
    """(H, W, 3) frame → (H/4, W/4, 4) latent."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"encode needs an (H, W, 3) frame, got {frame.shape}")
    return to_nhwc(ae.encode_tensor(to_nchw(frame, _dtype(ae))))[0]


@torch.no_grad()
def decode(ae: Autoencoder, latent: np.ndarray) -> np.ndarray:
    """(h, w, 4) latent → (4h, 4w, 3) frame clamped to [0, 1]."""
    latent = np.asarray(latent)
    if latent.ndim != 3 or latent.shape[2] != ae.cfg.latent_channels:
        raise ShapeError(f"decode needs an (h, w, {ae.cfg.latent_channels}) latent, got {latent.shape}")
    return to_nhwc(ae.decode_tensor(to_nchw(latent, _dtype(ae))))[0].astype(np.float64)


# ---------------------------------------------------------------------------
# Perceptual loss and optional patch discriminator


class FixedFeatures(nn.Module):
    """Seeded random conv features standing in for a pretrained perceptual net.

    Weights are buffers, never trained, and the activations are smooth so
    finite-difference checks through the loss stay meaningful.
    """

    def __init__(self, seed: int = 0, widths=(16, 32)):
        super().__init__()
        rng = keyed_generator(seed, "perceptual")
        shapes = [(widths[0], 3, 3, 3), (widths[1], widths[0], 3, 3)]
        for i, shape in enumerate(shapes):
            fan_in = shape[1] * shape[2] * shape[3]
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            self.register_buffer(f"w{i}", torch.from_numpy(w).float())

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = x * 2.0 - 1.0
        f0 = torch.tanh(F.conv2d(x, self.w0.to(x.dtype), padding=1))
        f1 = torch.tanh(F.conv2d(f0, self.w1.to(x.dtype), stride=2, padding=1))
        return [f0, f1]


def perceptual_loss(features: FixedFeatures, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return sum(((a - b) ** 2).mean() for a, b in zip(features(x), features(y)))


def reconstruction_loss(features: FixedFeatures, pred: torch.Tensor, target: torch.Tensor,
                        lambda_p: float = LAMBDA_PERCEPTUAL) -> torch.Tensor:
    """L1 + lambda_p * perceptual."""
    return (pred - target).abs().mean() + lambda_p * perceptual_loss(features, pred, target)


class PatchDiscriminator(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


def adaptive_adv_weight(rec_loss, adv_loss, last_layer: torch.Tensor, max_weight: float = 1e4) -> torch.Tensor:
    """lambda_d = |grad rec| / (|grad adv| + 1e-4) at the decoder's last layer."""
    g_rec = torch.autograd.grad(rec_loss, last_layer, retain_graph=True)[0]
    g_adv = torch.autograd.grad(adv_loss, last_layer, retain_graph=True)[0]
    return (g_rec.norm() / (g_adv.norm() + 1e-4)).clamp(0.0, max_weight).detach()


# ---------------------------------------------------------------------------
# Training


@dataclass
class AETrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    lambda_p: float = LAMBDA_PERCEPTUAL
    adversarial: bool = False
    adversarial_start: int = 1000
    seed: int = 0
    perceptual_seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100


def _cosine_lr(opt, base_lr: float, step: int, steps: int, warmup: int = 100) -> None:
    if step < warmup:
        lr = base_lr * (step + 1) / warmup
    else:
        lr = base_lr * 0.5 * (1 + np.cos(np.pi * (step - warmup) / max(1, steps - warmup)))
    for group in opt.param_groups:
        group["lr"] = lr


def train_autoencoder(frames: np.ndarray, cfg: AETrainConfig = AETrainConfig(),
                      arch: AEConfig = AEConfig()) -> tuple[Autoencoder, LossLog]:
    """Fit E and D on ``frames`` (M, H, W, 3) with L1 + lambda_p * L_p (+ adaptive GAN term)."""
    torch.manual_seed(cfg.seed)
    model = Autoencoder(arch)
    data = to_nchw(frames)
    features = FixedFeatures(cfg.perceptual_seed)
    gen = torch_generator(cfg.seed, "train_ae.batches")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    disc = disc_opt = None
    if cfg.adversarial:
        disc = PatchDiscriminator()
        disc_opt = torch.optim.AdamW(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.9))
    guard = DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    losses = LossLog()
    for step in range(cfg.steps):
        _cosine_lr(opt, cfg.lr, step, cfg.steps)
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        x = data[idx]
        pred = model.decoder(model.encoder(x))
        loss = reconstruction_loss(features, pred, x, cfg.lambda_p)
        if disc is not None and step >= cfg.adversarial_start:
            adv = -disc(pred).mean()
            weight = adaptive_adv_weight(loss, adv, model.decoder.conv_out.weight)
            loss = loss + weight * adv
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if disc is not None and step >= cfg.adversarial_start:
            d_loss = F.relu(1 - disc(x)).mean() + F.relu(1 + disc(pred.detach())).mean()
            disc_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            disc_opt.step()
        value = float(loss.detach())
        losses.append(value)
        guard.update(step, value)
        log_progress("autoencoder", step, cfg.steps, value)
    model.fit_latent_normalization(data)
    model.eval()
    return model, losses


# ---------------------------------------------------------------------------
# Video decoder


class TemporalConv(nn.Module):
    """Conv over the frame axis (kernel 3, zero padded at clip ends), Dirac-initialized."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
        nn.init.dirac_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, h: torch.Tensor, frames: int) -> torch.Tensor:
        bn, c, hh, ww = h.shape
        b = bn // frames
        x = h.reshape(b, frames, c, hh, ww).permute(0, 3, 4, 2, 1).reshape(b * hh * ww, c, frames)
        x = self.conv(x)
        return x.reshape(b, hh, ww, c, frames).permute(0, 4, 3, 1, 2).reshape(bn, c, hh, ww)


class VideoDecoder(nn.Module):
    """Frozen decoder D + grayscale encoder G + 1x1 shortcut projections + temporal convs.

    Per decoder level i: ``h = temporal_i(res_i(h)); h = h + proj_i(G_i(gray))``.
    Projections start at zero and temporal kernels at identity, so a fresh
    video decoder reproduces per-frame decoding.
    """

    def __init__(self, ae: Autoencoder):
        super().__init__()
        self.ae = ae
        for p in self.ae.parameters():
            p.requires_grad_(False)
        cfg = ae.cfg
        self.gray_encoder = Encoder(1, cfg)
        dec_widths = ae.decoder.widths
        enc_widths = tuple(reversed(cfg.widths))  # G features ordered coarse → fine to match D
        self.projections = nn.ModuleList(
            [nn.Conv2d(ec, dc, 1) for ec, dc in zip(enc_widths, dec_widths)]
        )
        for proj in self.projections:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
        self.temporal = nn.ModuleList([TemporalConv(c) for c in dec_widths])

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("ae.")]

    def forward(self, latents: torch.Tensor, grays: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """latents (B, N, c, h, w), grays (B, N, 1, H, W) → (B, N, 3, H, W)."""
        if latents.ndim != 5 or grays.ndim != 5:
            raise ShapeError("decode_video expects (B, N, ...) latent and gray clips")
        b, n = latents.shape[:2]
        if grays.shape[:2] != (b, n):
            raise ShapeError(f"{n} latents vs {grays.shape[1]} grayscale frames")
        z = latents.reshape(b * n, *latents.shape[2:])
        g = grays.reshape(b * n, *grays.shape[2:])
        _check_pixels(g, channels=1)
        if g.shape[2] != z.shape[2] * DOWNSAMPLE or g.shape[3] != z.shape[3] * DOWNSAMPLE:
            raise ShapeError(f"gray frames {tuple(g.shape[2:])} do not match latents {tuple(z.shape[2:])}")
        gfeats = list(reversed(self.gray_encoder.features(g)))

        def hook(level, h):
            h = self.temporal[level](h, n)
            return h + self.projections[level](gfeats[level])

        out = self.ae.decode_raw(z, hook=hook)
        if clamp:
            out = out.clamp(0.0, 1.0)
        return out.reshape(b, n, *out.shape[1:])

    def param_store(self) -> ParamStore:
        tensors = {k: v for k, v in ParamStore.from_module(self).tensors.items() if not k.startswith("ae.")}
        return ParamStore(tensors, meta={"config": self.ae.cfg.to_meta(), "kind": b"video_decoder",
                                         "autoencoder_hash": module_hash(self.ae).encode()})

    @classmethod
    def from_store(cls, store: ParamStore, ae: Autoencoder) -> "VideoDecoder":
        expected = store.meta.get("autoencoder_hash", b"").decode()
        if expected and expected != module_hash(ae):
            raise ValueError("video decoder was trained against a different autoencoder")
        model = cls(ae)
        full = dict(ParamStore.from_module(model).tensors)
        full.update(store.tensors)
        ParamStore(full).load_into(model)
        return model


@torch.no_grad()
def decode_video(vdec: VideoDecoder, latents: np.ndarray, grays: FrameSequence | np.ndarray) -> FrameSequence:
    """(N, h, w, 4) latents + N grayscale frames → N RGB frames."""
    latents = np.asarray(latents)
    g = grays.array() if isinstance(grays, FrameSequence) else np.asarray(grays)
    if g.ndim != 4 or g.shape[-1] != 1:
        raise ShapeError(f"expected (N, H, W, 1) grayscale frames, got {g.shape}")
    if len(latents) != len(g):
        raise ShapeError(f"{len(latents)} latents vs {len(g)} grayscale frames")
    z = to_nchw(latents, _dtype(vdec))[None]
    gt = to_nchw(g, _dtype(vdec))[None]
    out = vdec(z, gt)[0]
    return FrameSequence.from_array(to_nhwc(out).astype(np.float64))


@dataclass
class VideoDecoderTrainConfig:
    steps: int = 2000
    clips_per_batch: int = 2
    lr: float = 1e-3
    lambda_p: float = LAMBDA_PERCEPTUAL
    latent_noise: float = 0.0
    seed: int = 0
    perceptual_seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100


def train_video_decoder(clips: np.ndarray, ae: Autoencoder,
                        cfg: VideoDecoderTrainConfig = VideoDecoderTrainConfig()) -> tuple[VideoDecoder, LossLog]:
    """Train G, projections and temporal kernels on clips (C, N, H, W, 3); D stays frozen."""
    torch.manual_seed(cfg.seed)
    before = module_hash(ae)
    vdec = VideoDecoder(ae)
    c, n = clips.shape[:2]
    data = to_nchw(clips.reshape(c * n, *clips.shape[2:])).reshape(c, n, 3, *clips.shape[2:4])
    with torch.no_grad():
        latents = torch.cat([ae.encode_tensor(data[i : i + 16].flatten(0, 1)) for i in range(0, c, 16)])
    latents = latents.reshape(c, n, *latents.shape[1:])
    grays = gray_tensor(data.flatten(0, 1)).reshape(c, n, 1, *clips.shape[2:4])
    features = FixedFeatures(cfg.perceptual_seed)
    gen = torch_generator(cfg.seed, "train_video_decoder.batches")
    opt = torch.optim.AdamW(vdec.trainable_parameters(), lr=cfg.lr, weight_decay=0.0)
    guard = DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    losses = LossLog()
    for step in range(cfg.steps):
        _cosine_lr(opt, cfg.lr, step, cfg.steps)
        idx = torch.randint(c, (cfg.clips_per_batch,), generator=gen)
        z = latents[idx]
        if cfg.latent_noise:
            z = z + cfg.latent_noise * torch.randn(z.shape, generator=gen)
        pred = vdec(z, grays[idx], clamp=False)
        target = data[idx]
        loss = reconstruction_loss(features, pred.flatten(0, 1), target.flatten(0, 1), cfg.lambda_p)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = float(loss.detach())
        losses.append(value)
        guard.update(step, value)
        log_progress("video_decoder", step, cfg.steps, value)
    check_unchanged(before, ae, "autoencoder")
    vdec.eval()
    return vdec, losses
