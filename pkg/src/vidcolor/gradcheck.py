"""Central finite-difference gradient checks on micro-sized float64 models.

Each case builds a block with at most ~1e3 parameters, perturbs its weights
away from any identity/zero initialization (so every path carries gradient)
and compares autograd against ``(L(p + h) - L(p - h)) / 2h`` over every
parameter entry. The error is norm-wise:
``|g_fd - g_auto| / max(|g_fd|, |g_auto|)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

from .autoencoder import (AEConfig, Autoencoder, FixedFeatures, PatchDiscriminator, TemporalConv, VideoDecoder,
                          reconstruction_loss)
from .coordinator import ColorPropagationAttention, ConditionalDenoiser, Coordinator, Injection
from .diffusion import Denoiser, UNetConfig, diffusion_loss
from .nn_blocks import CrossAttention, ResBlock

STEP = 1e-3
TOLERANCE = 1e-4
MAX_PARAMETERS = 1000


@dataclass
class GradCheckResult:
    name: str
    parameters: int
    rel_error: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= TOLERANCE


def finite_difference(loss_fn: Callable[[], torch.Tensor], params: list[torch.Tensor], h: float = STEP):
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a: list[torch.Tensor], b: list[torch.Tensor]) -> float:
    va = torch.cat([x.reshape(-1) for x in a])
    vb = torch.cat([x.reshape(-1) for x in b])
    scale = max(va.norm().item(), vb.norm().item())
    if scale == 0.0:
        return 0.0
    return (va - vb).norm().item() / scale


def check(name: str, loss_fn: Callable[[], torch.Tensor], params: list[torch.Tensor], h: float = STEP) -> GradCheckResult:
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks need float64 parameters")
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    numeric = finite_difference(loss_fn, params, h)
    return GradCheckResult(name, sum(p.numel() for p in params), relative_error(analytic, numeric))


def _scramble(module: nn.Module, gen: torch.Generator, scale: float = 0.5) -> None:
    # Break zero / identity / Dirac initializations so no path is gradient-free.
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def _offset_target(pred: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # Residuals bounded away from zero keep the L1 term differentiable under perturbation.
    sign = torch.where(torch.rand(pred.shape, generator=gen) < 0.5, -1.0, 1.0).to(pred.dtype)
    return (pred + sign * (0.25 + 0.5 * torch.rand(pred.shape, generator=gen, dtype=pred.dtype))).detach()


MICRO_AE = AEConfig(widths=(2, 2, 2), latent_channels=4, groups=1)
MICRO_UNET = UNetConfig(channels=(2, 2), latent_channels=2, time_dim=2, text_dim=2, vocab_size=4, groups=1)


def micro_cases(seed: int = 0) -> dict[str, tuple[Callable[[], torch.Tensor], list[torch.Tensor]]]:
    """name -> (loss closure, parameters under test)."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rnd = lambda *shape: torch.randn(*shape, generator=gen, dtype=torch.float64)  # noqa: E731
    cases = {}

    # autoencoder: L1 + lambda_p * perceptual through E and D
    ae = Autoencoder(MICRO_AE).double()
    feats = FixedFeatures(seed, widths=(3, 3)).double()
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        target = _offset_target(ae.decode_raw(ae.encode_tensor(x)), gen)
    cases["autoencoder"] = (
        lambda: reconstruction_loss(feats, ae.decode_raw(ae.encode_tensor(x)), target),
        list(ae.parameters()),
    )

    # video decoder: G, projections and temporal kernels (D frozen)
    base_ae = Autoencoder(MICRO_AE).double()
    vdec = VideoDecoder(base_ae).double()
    _scramble(vdec.projections, gen)
    _scramble(vdec.temporal, gen, 0.2)
    z = rnd(1, 3, 4, 2, 2)
    g = torch.rand(1, 3, 1, 8, 8, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        vtarget = _offset_target(vdec(z, g, clamp=False).flatten(0, 1), gen)
    cases["video_decoder"] = (
        lambda: reconstruction_loss(feats, vdec(z, g, clamp=False).flatten(0, 1), vtarget),
        vdec.trainable_parameters(),
    )

    # base denoiser: epsilon-prediction loss
    base = Denoiser(MICRO_UNET).double()
    _scramble(base, gen, 0.3)
    zt, eps = rnd(2, 2, 4, 4), rnd(2, 2, 4, 4)
    t = torch.tensor([10, 700])
    tokens = torch.tensor([[1, 2, 0], [3, 0, 0]])
    cases["denoiser"] = (lambda: diffusion_loss(eps, base(zt, t, tokens)), list(base.parameters()))

    # coordinator: conditional loss with the (perturbed) base frozen
    coord = Coordinator(MICRO_UNET).double()
    _scramble(coord, gen, 0.3)
    model = ConditionalDenoiser(copy.deepcopy(base), coord)  # freezes its own copy
    gc = torch.rand(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    gr = torch.rand(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    zr = rnd(2, 2, 4, 4)
    cases["coordinator"] = (
        lambda: diffusion_loss(eps, model(zt, t, tokens, gc, gr, zr)),
        list(coord.parameters()),
    )

    # individual blocks
    cpa = ColorPropagationAttention(3, key_dim=2).double()
    a, b, c = rnd(2, 3, 3, 3), rnd(2, 3, 3, 3), rnd(2, 3, 3, 3)
    w_out = rnd(2, 3, 3, 3)
    cases["color_propagation_attention"] = (lambda: (cpa(a, b, c) * w_out).sum(), list(cpa.parameters()))

    inj = Injection(3, 2).double()
    _scramble(inj, gen)
    fb, fa = rnd(2, 3, 3, 3), rnd(2, 2, 3, 3)
    cases["injection"] = (lambda: (inj(fb, fa) * w_out).sum(), list(inj.parameters()))

    res = ResBlock(2, 3, emb_dim=4, groups=1).double()
    xr, er, wr = rnd(2, 2, 4, 4), rnd(2, 4), rnd(2, 3, 4, 4)
    cases["resblock"] = (lambda: (res(xr, er) * wr).sum(), list(res.parameters()))

    xattn = CrossAttention(4, 3, groups=2).double()
    xa, ctx, wa = rnd(2, 4, 3, 3), rnd(2, 5, 3), rnd(2, 4, 3, 3)
    cases["cross_attention"] = (lambda: (xattn(xa, ctx) * wa).sum(), list(xattn.parameters()))

    tconv = TemporalConv(3).double()
    _scramble(tconv, gen, 0.2)
    xt, wt = rnd(8, 3, 2, 2), rnd(8, 3, 2, 2)
    cases["temporal_conv"] = (lambda: (tconv(xt, 4) * wt).sum(), list(tconv.parameters()))

    disc = PatchDiscriminator(width=2).double()
    xd = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    cases["patch_discriminator"] = (lambda: -disc(xd).mean(), list(disc.parameters()))
    return cases


def run_all(seed: int = 0, h: float = STEP) -> list[GradCheckResult]:
    return [check(name, fn, params, h) for name, (fn, params) in micro_cases(seed).items()]


if __name__ == "__main__":  # pragma: no cover
    for r in run_all():
        print(f"{r.name:30s} params={r.parameters:5d} rel_err={r.rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
