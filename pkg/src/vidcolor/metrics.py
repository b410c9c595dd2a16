"""Frame and clip quality metrics plus the plain-text metric report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .config import read_config
from .frames_io import FrameSequence, load_sequence, quantize, rgb_to_gray
from .toy_data import MANIFEST

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
BINS = 256
METRICS = ("psnr", "ssim", "colorfulness", "cdc")


class MetricError(ValueError):
    pass


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range frames; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _luma(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3 and frame.shape[2] == 3:
        return rgb_to_gray(frame)[..., 0]
    if frame.ndim == 3 and frame.shape[2] == 1:
        return frame[..., 0]
    if frame.ndim == 2:
        return frame
    raise MetricError(f"unsupported frame shape {frame.shape}")


def _filter_valid(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    # Separable Gaussian, keeping only positions where the window fits entirely.
    r = len(window) // 2
    y = correlate1d(x, window, axis=0, mode="constant")
    y = correlate1d(y, window, axis=1, mode="constant")
    return y[r : x.shape[0] - r, r : x.shape[1] - r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all positions where the 11x11 Gaussian window fits, on BT.601 luma."""
    x, y = _luma(a), _luma(b)
    _same_shape(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise MetricError(f"frame {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    mu_x, mu_y = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mu_x**2
    syy = _filter_valid(y * y, w) - mu_y**2
    sxy = _filter_valid(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def colorfulness(frame: np.ndarray) -> float:
    """Hasler–Süsstrunk colorfulness on the 0–255 scale."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise MetricError(f"colorfulness needs an RGB frame, got shape {frame.shape}")
    r, g, b = (frame[..., c] * 255.0 for c in range(3))
    rg = r - g
    yb = 0.5 * (r + g) - b
    std = math.sqrt(rg.var() + yb.var())
    mean = math.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return std + 0.3 * mean


def channel_histograms(frame: np.ndarray) -> np.ndarray:
    """(3, 256) per-channel histograms of byte-quantized values, each summing to 1."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise MetricError(f"histograms need an RGB frame, got shape {frame.shape}")
    q = quantize(frame).reshape(-1, 3)
    hist = np.stack([np.bincount(q[:, c], minlength=BINS) for c in range(3)]).astype(np.float64)
    return hist / q.shape[0]


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen–Shannon divergence with base-2 logs (in [0, 1])."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _same_shape(p, q)
    for name, d in (("p", p), ("q", q)):
        if (d < 0).any() or abs(d.sum() - 1.0) > 1e-6:
            raise MetricError(f"{name} is not a normalized distribution (sum {d.sum()!r})")
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(x[nz] / m[nz])))

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def cdc(video) -> float:
    """Mean over consecutive frame pairs of the channel-averaged histogram JSD."""
    frames = video.frames if isinstance(video, FrameSequence) else list(video)
    if len(frames) < 2:
        raise MetricError("CDC needs at least two frames")
    hists = [channel_histograms(f) for f in frames]
    pair_values = [
        sum(jsd(h0[c], h1[c]) for c in range(3)) / 3.0 for h0, h1 in zip(hists[:-1], hists[1:])
    ]
    return math.fsum(pair_values) / len(pair_values)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    config: dict[str, str]
    per_clip: dict[str, dict[str, float]] = field(default_factory=dict)  # metric -> clip -> value

    def aggregate(self, metric: str) -> tuple[float, int]:
        """Mean of finite per-clip values and the number of skipped infinities."""
        values = list(self.per_clip[metric].values())
        finite = [v for v in values if math.isfinite(v)]
        skipped = len(values) - len(finite)
        if not finite:
            return (math.inf if values else math.nan), skipped
        return math.fsum(finite) / len(finite), skipped

    def to_text(self) -> str:
        lines = [f"# {k} = {v}" for k, v in sorted(self.config.items())]
        for metric, rows in self.per_clip.items():
            lines.append(f"metric={metric}")
            for clip, value in rows.items():
                lines.append(f"clip_{clip} {format_value(value)}")
            agg, skipped = self.aggregate(metric)
            lines.append(f"aggregate {format_value(agg)}")
            if skipped:
                lines.append(f"skipped_inf {skipped}")
        return "\n".join(lines) + "\n"


def format_value(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6g}"


def parse_report(text: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    current = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("metric="):
            current = line.split("=", 1)[1]
            out[current] = {"clips": {}}
        else:
            key, value = line.split(" ", 1)
            if key.startswith("clip_"):
                out[current]["clips"][key[len("clip_"):]] = float(value)
            else:
                out[current][key] = float(value)
    return out


def _clip_dirs(root: Path) -> dict[str, Path]:
    manifest = root / MANIFEST
    if manifest.exists():
        names = [n.strip() for n in manifest.read_text(encoding="utf-8").splitlines() if n.strip()]
    elif any(p.name.startswith("frame_") for p in root.iterdir()):
        return {"0000": root}
    else:
        names = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name.startswith("clip_"))
    return {n[len("clip_"):] if n.startswith("clip_") else n: root / n for n in names}


def clip_metrics(pred: FrameSequence, gt: FrameSequence, metrics) -> dict[str, float]:
    out = {}
    p, g = pred.array(), gt.array()
    for m in metrics:
        if m == "psnr":
            out[m] = psnr(p, g)
        elif m == "ssim":
            out[m] = math.fsum(ssim(a, b) for a, b in zip(p, g)) / len(p)
        elif m == "colorfulness":
            out[m] = math.fsum(colorfulness(a) for a in p) / len(p)
        elif m == "cdc":
            out[m] = cdc(pred)
        else:
            raise MetricError(f"unknown metric {m!r}")
    return out


def evaluate_report(pred_dir, gt_dir, metrics=METRICS, config: dict | None = None) -> MetricReport:
    """Per-clip and aggregate metrics; ``config`` (e.g. the run settings and seed) is echoed in the header."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    metrics = list(metrics)
    for m in metrics:
        if m not in METRICS:
            raise MetricError(f"unknown metric {m!r}; choose from {METRICS}")
    echo = {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "metrics": ",".join(metrics)}
    echo.update({k: str(v) for k, v in (config or {}).items()})
    pred_run = pred_dir / "run.cfg"
    if pred_run.exists():  # seed provenance of the colorization run
        for k, v in read_config(pred_run).items():
            echo.setdefault(f"pred.{k}", v)
    report = MetricReport(echo)
    if not metrics:
        return report
    pred_clips, gt_clips = _clip_dirs(pred_dir), _clip_dirs(gt_dir)
    if set(pred_clips) != set(gt_clips):
        only_p = sorted(set(pred_clips) - set(gt_clips))
        only_g = sorted(set(gt_clips) - set(pred_clips))
        raise MetricError(f"clip sets differ: only in pred {only_p[:5]}, only in gt {only_g[:5]}")
    report.per_clip = {m: {} for m in metrics}
    for clip in sorted(pred_clips):
        pred = load_sequence(pred_clips[clip])
        gt = load_sequence(gt_clips[clip])
        if len(pred) != len(gt) or pred.shape != gt.shape:
            raise MetricError(
                f"clip {clip}: pred has {len(pred)} frames of {pred.shape}, gt has {len(gt)} of {gt.shape}"
            )
        for m, v in clip_metrics(pred, gt, metrics).items():
            report.per_clip[m][clip] = v
    return report
