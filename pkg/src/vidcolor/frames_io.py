"""Frame sequences on disk (binary PPM) and color-space arithmetic.

Frames are float arrays shaped ``(H, W, C)`` with ``C`` in ``{1, 3}`` and
values in ``[0, 1]``. All luminance math in the package goes through
:func:`rgb_to_gray` so training, decoding and evaluation agree.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# BT.601 luma weights.
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

FRAME_PATTERN = "frame_{:05d}.ppm"
_FRAME_RE = re.compile(r"^frame_(\d{5})\.ppm$")
CAPTION_FILE = "caption.txt"


class FrameShapeError(ValueError):
    pass


class FrameFormatError(ValueError):
    """Directory layout problems: missing or non-contiguous frame indices."""


class PPMParseError(ValueError):
    pass


def check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise FrameShapeError(f"expected (H, W, 1|3) frame, got shape {frame.shape}")
    h, w, _ = frame.shape
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise FrameShapeError(f"frame dims must be >= 8 and divisible by 4, got {h}x{w}")
    if frame.size and (np.nanmin(frame) < 0.0 or np.nanmax(frame) > 1.0 or np.isnan(frame).any()):
        raise FrameShapeError("frame values must lie in [0, 1]")
    return frame


def rgb_to_gray(frame: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an ``(H, W, 3)`` frame, returned as ``(H, W, 1)``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise FrameShapeError(f"rgb_to_gray needs 3 channels, got shape {frame.shape}")
    gray = frame @ GRAY_WEIGHTS
    # Rounding can push a pure-white pixel a few ulps past 1.
    return np.clip(gray, 0.0, 1.0)[..., None]


def gray_to_rgb(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.shape[-1] == 3:
        return frame
    return np.repeat(frame, 3, axis=-1)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes, rounding half up."""
    scaled = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


@dataclass
class FrameSequence:
    """Ordered, homogeneous frames plus an optional bag-of-words caption."""

    frames: list[np.ndarray]
    caption: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise FrameShapeError("a frame sequence needs at least one frame")
        self.frames = [check_frame(f) for f in self.frames]
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise FrameShapeError(f"frame {i} has shape {f.shape}, expected {shape}")
        self.caption = list(self.caption)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape

    @property
    def channels(self) -> int:
        return self.shape[2]

    def array(self) -> np.ndarray:
        """Stacked ``(N, H, W, C)`` array."""
        return np.stack(self.frames)

    def to_gray(self) -> "FrameSequence":
        if self.channels == 1:
            return self
        return FrameSequence([rgb_to_gray(f) for f in self.frames], self.caption)

    @classmethod
    def from_array(cls, array: np.ndarray, caption: Sequence[str] = ()) -> "FrameSequence":
        return cls([np.asarray(a) for a in array], list(caption))


def write_ppm(path, frame: np.ndarray) -> None:
    frame = gray_to_rgb(check_frame(frame))
    h, w, _ = frame.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(quantize(frame).tobytes())
    except OSError as exc:
        raise OSError(f"failed to write frame {path}: {exc}") from exc


def _header_tokens(data: bytes):
    """Yield (token, end offset) for the three PPM header fields after the magic."""
    pos = 2
    n = len(data)
    while True:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        yield data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 file into an ``(H, W, 3)`` float array in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise PPMParseError(f"{path}: not a binary PPM (magic {data[:2]!r})")
    fields = []
    end = 2
    tokens = _header_tokens(data)
    try:
        for _ in range(3):
            tok, end = next(tokens)
            fields.append(int(tok))
    except (ValueError, StopIteration) as exc:
        raise PPMParseError(f"{path}: malformed header") from exc
    width, height, maxval = fields
    if maxval != 255 or width <= 0 or height <= 0:
        raise PPMParseError(f"{path}: unsupported header {width}x{height} maxval {maxval}")
    # Exactly one whitespace byte separates the header from the raster.
    payload = data[end + 1 :]
    expected = width * height * 3
    if len(payload) != expected:
        raise PPMParseError(f"{path}: expected {expected} raster bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def load_sequence(directory, channels: int | None = None) -> FrameSequence:
    """Load ``frame_%05d.ppm`` files (indices 0..N-1) and an optional caption.

    PPM always stores three channels; pass ``channels=1`` to collapse frames
    whose channels are equal (grayscale) to a single channel.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameFormatError(f"{directory}: not a directory")
    indices = []
    for name in os.listdir(directory):
        m = _FRAME_RE.match(name)
        if m:
            indices.append(int(m.group(1)))
    if not indices:
        raise FrameFormatError(f"{directory}: no frame_%05d.ppm files")
    indices.sort()
    if indices != list(range(len(indices))):
        missing = sorted(set(range(indices[-1] + 1)) - set(indices))
        raise FrameFormatError(f"{directory}: non-contiguous frame indices, missing {missing[:5]}")
    frames = [read_ppm(directory / FRAME_PATTERN.format(i)) for i in indices]
    if channels == 1:
        for i, f in enumerate(frames):
            if not (np.array_equal(f[..., 0], f[..., 1]) and np.array_equal(f[..., 0], f[..., 2])):
                raise FrameFormatError(f"{directory}: frame {i} is not grayscale")
        frames = [f[..., :1] for f in frames]
    caption: list[str] = []
    cap_path = directory / CAPTION_FILE
    if cap_path.exists():
        caption = cap_path.read_text(encoding="utf-8").split()
    return FrameSequence(frames, caption)


def save_sequence(seq: FrameSequence, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    for i, frame in enumerate(seq.frames):
        write_ppm(directory / FRAME_PATTERN.format(i), frame)
    if seq.caption:
        try:
            (directory / CAPTION_FILE).write_text(" ".join(seq.caption) + "\n", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"failed to write caption in {directory}: {exc}") from exc
