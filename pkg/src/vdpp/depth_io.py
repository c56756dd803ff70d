"""Depth frames and sequences on disk: PFM in, PFM/PGM out, slit-scans."""
from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DepthFormatError",
    "DepthSequence",
    "validate_frame",
    "read_pfm",
    "write_pfm",
    "load_sequence",
    "save_sequence",
    "disparity_to_depth",
    "render_gray",
    "write_pgm",
    "read_pgm",
    "slit_scan",
]


class DepthFormatError(ValueError):
    pass


def validate_frame(values, name: str = "frame") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DepthFormatError(f"{name}: expected a 2-D depth map, got shape {arr.shape}")
    if arr.shape[0] < 3 or arr.shape[1] < 3:
        raise DepthFormatError(f"{name}: depth map must be at least 3x3, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DepthFormatError(f"{name}: non-finite depth values")
    return arr


@dataclass
class DepthSequence:
    """T frames of equal H x W depth stored as a float64 (T, H, W) array."""

    frames: np.ndarray
    frame_rate: float | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 3:
            raise DepthFormatError(f"sequence must be (T, H, W), got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise DepthFormatError(f"sequence needs at least 2 frames, got {arr.shape[0]}")
        for t in range(arr.shape[0]):
            validate_frame(arr[t], name=f"frame {t}")
        self.frames = arr

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    def __len__(self) -> int:
        return self.T

    def __getitem__(self, t) -> np.ndarray:
        return self.frames[t]


def _readline(f) -> bytes:
    line = f.readline()
    if not line:
        raise DepthFormatError("unexpected end of PFM header")
    return line.strip()


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM file, returning float64 rows top-to-bottom."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = _readline(f)
        if magic == b"PF":
            raise DepthFormatError(f"{path}: unsupported: color PFM")
        if magic != b"Pf":
            raise DepthFormatError(f"{path}: bad magic {magic!r}, expected b'Pf'")
        dims = _readline(f).split()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(_readline(f))
        except (IndexError, ValueError) as exc:
            raise DepthFormatError(f"{path}: malformed PFM header") from exc
        if width <= 0 or height <= 0 or scale == 0:
            raise DepthFormatError(f"{path}: invalid PFM dimensions or scale")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read()
    n = width * height
    if len(payload) != 4 * n:
        raise DepthFormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * n} for {width}x{height}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    data = np.flipud(data).astype(np.float64)
    if not np.isfinite(data).all():
        raise DepthFormatError(f"{path}: non-finite values in payload")
    return data


def write_pfm(frame, path) -> None:
    frame = validate_frame(frame)
    h, w = frame.shape
    payload = np.flipud(frame).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(payload)


def load_sequence(directory, pattern: str = "*.pfm", frame_rate: float | None = None) -> DepthSequence:
    """Load every file matching ``pattern`` in name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DepthFormatError(f"{directory}: not a directory")
    names = sorted(n for n in os.listdir(directory) if fnmatch.fnmatch(n, pattern))
    if not names:
        raise DepthFormatError(f"{directory}: no frames matched {pattern!r}")
    if len(names) < 2:
        raise DepthFormatError(f"{directory}: need at least 2 frames, found {len(names)}")
    frames = []
    for name in names:
        try:
            frame = read_pfm(directory / name)
        except (OSError, DepthFormatError) as exc:
            raise DepthFormatError(f"unreadable frame {name}: {exc}") from exc
        if frames and frame.shape != frames[0].shape:
            raise DepthFormatError(
                f"frame {name} has resolution {frame.shape[0]}x{frame.shape[1]}, "
                f"expected {frames[0].shape[0]}x{frames[0].shape[1]} (from {names[0]})"
            )
        frames.append(validate_frame(frame, name=name))
    return DepthSequence(np.stack(frames), frame_rate=frame_rate, names=names)


def save_sequence(seq: DepthSequence | np.ndarray, directory, fmt: str = "frame_{:05d}.pfm") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = seq.frames if isinstance(seq, DepthSequence) else np.asarray(seq)
    paths = []
    for t, frame in enumerate(frames):
        p = directory / fmt.format(t)
        write_pfm(frame, p)
        paths.append(p)
    return paths


def disparity_to_depth(d, eps: float = 1e-6) -> np.ndarray:
    return 1.0 / np.maximum(np.asarray(d, dtype=np.float64), eps)


def render_gray(frame, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear map of [lo, hi] to 0..255 (floored, clamped) as uint8.

    Without an explicit range the frame's own min/max is used, and a constant
    frame renders all zero.
    """
    frame = np.asarray(frame, dtype=np.float64)
    lo = float(frame.min()) if lo is None else float(lo)
    hi = float(frame.max()) if hi is None else float(hi)
    if hi < lo:
        raise ValueError(f"render_gray: need lo < hi, got lo={lo}, hi={hi}")
    if hi == lo:
        if frame.min() != frame.max():
            raise ValueError(f"render_gray: degenerate range lo == hi == {lo} for a non-constant frame")
        return np.zeros(frame.shape, dtype=np.uint8)
    scaled = np.floor((frame - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise DepthFormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def slit_scan(
    seq: DepthSequence | np.ndarray,
    axis: str,
    index: int,
    lo: float | None = None,
    hi: float | None = None,
) -> np.ndarray:
    """Stack line ``index`` of every frame over time and render to uint8.

    ``axis="row"`` gives a T x W image (one row per frame); ``axis="column"``
    gives H x T (one column per frame).  The gray range defaults to the
    sequence-wide min/max so bands stay comparable across time.
    """
    frames = seq.frames if isinstance(seq, DepthSequence) else np.asarray(seq, dtype=np.float64)
    _, h, w = frames.shape
    if axis == "row":
        if not 0 <= index < h:
            raise IndexError(f"slit_scan: row {index} out of range [0, {h})")
        lines = frames[:, index, :]
    elif axis == "column":
        if not 0 <= index < w:
            raise IndexError(f"slit_scan: column {index} out of range [0, {w})")
        lines = frames[:, :, index].T
    else:
        raise ValueError(f"slit_scan: axis must be 'row' or 'column', got {axis!r}")
    lo = float(frames.min()) if lo is None else lo
    hi = float(frames.max()) if hi is None else hi
    return render_gray(lines, lo, hi)
