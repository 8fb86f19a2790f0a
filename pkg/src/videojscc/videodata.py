"""Video ingestion, GOP slicing, training crops and synthetic clips.

Frames are float32 torch tensors of shape (3, H, W) with values in [0, 1].
Dataset layouts:
  * ``<root>/<sequence_name>/frame_%05d.png`` (any zero-padded numbering works,
    frames are taken in sorted order)
  * ``<root>/<name>.yuv`` + ``<name>.json`` with {"width": W, "height": H,
    "frames": N} for planar 8-bit YUV420.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image


class VideoDataError(Exception):
    """Raised for malformed or inconsistent video inputs."""


# BT.601 full-range YUV -> RGB, applied to (Y, U-128, V-128) in [0, 255].
BT601_FULL_RANGE = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ],
    dtype=np.float64,
)


@dataclass
class Frame:
    """One RGB frame, pixels (3, H, W) float32 in [0, 1]."""

    pixels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise VideoDataError(f"frame must be (3, H, W), got {tuple(self.pixels.shape)}")
        self.pixels = self.pixels.float()

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class FrameSequence:
    frames: list[Frame]
    frame_rate: Optional[float] = None

    def __post_init__(self):
        if self.frames:
            h, w = self.frames[0].height, self.frames[0].width
            for i, f in enumerate(self.frames):
                if (f.height, f.width) != (h, w):
                    raise VideoDataError(
                        f"frame {i} has size {f.height}x{f.width}, expected {h}x{w}"
                    )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Gop:
    """One group of pictures; frame 0 is the I-frame, the rest are P-frames."""

    frames: list[Frame]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise VideoDataError("a GOP needs at least one frame")

    @property
    def index_of_iframe(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.frames)


def _frame_from_array(rgb: np.ndarray) -> Frame:
    return Frame(torch.from_numpy(np.ascontiguousarray(rgb, dtype=np.float32)))


def load_png_frame(path: Path) -> Frame:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return _frame_from_array(arr.transpose(2, 0, 1))


def save_png_frame(frame: Frame, path: Path) -> None:
    arr = frame.pixels.clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    img.save(path)


def yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Convert one planar 8-bit YUV420 frame to (3, H, W) RGB in [0, 1]."""
    h, w = y.shape
    u_full = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)[:h, :w]
    v_full = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)[:h, :w]
    yuv = np.stack(
        [y.astype(np.float64), u_full.astype(np.float64) - 128.0, v_full.astype(np.float64) - 128.0]
    )
    rgb = np.einsum("ij,jhw->ihw", BT601_FULL_RANGE, yuv) / 255.0
    return np.clip(rgb, 0.0, 1.0)


def _load_yuv_sequence(path: Path) -> FrameSequence:
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise VideoDataError(f"missing resolution descriptor {sidecar}")
    meta = json.loads(sidecar.read_text())
    try:
        w, h, n = int(meta["width"]), int(meta["height"]), int(meta["frames"])
    except KeyError as e:
        raise VideoDataError(f"{sidecar} missing key {e}") from e
    if h % 2 or w % 2:
        raise VideoDataError(f"{path}: YUV420 requires even dimensions, got {w}x{h}")
    frame_bytes = h * w + 2 * (h // 2) * (w // 2)
    data = np.fromfile(path, dtype=np.uint8)
    if data.size < n * frame_bytes:
        raise VideoDataError(
            f"{path}: expected {n * frame_bytes} bytes for {n} frames, found {data.size}"
        )
    frames = []
    for t in range(n):
        buf = data[t * frame_bytes : (t + 1) * frame_bytes]
        y = buf[: h * w].reshape(h, w)
        u = buf[h * w : h * w + (h // 2) * (w // 2)].reshape(h // 2, w // 2)
        v = buf[h * w + (h // 2) * (w // 2) :].reshape(h // 2, w // 2)
        frames.append(_frame_from_array(yuv420_to_rgb(y, u, v)))
    return FrameSequence(frames, frame_rate=meta.get("frame_rate"))


def _numeric_key(path: Path):
    m = re.search(r"(\d+)", path.stem)
    return (int(m.group(1)) if m else 0, path.name)


def load_sequence(path: str | Path, layout: str = "png_frames") -> FrameSequence:
    """Load a frame directory or a raw YUV file into normalized RGB frames."""
    path = Path(path)
    if layout == "png_frames":
        if not path.is_dir():
            raise VideoDataError(f"{path} is not a directory")
        files = sorted(path.glob("*.png"), key=_numeric_key)
        if not files:
            raise VideoDataError(f"no PNG frames found in {path}")
        frames = [load_png_frame(f) for f in files]
        h, w = frames[0].height, frames[0].width
        for f, fr in zip(files, frames):
            if (fr.height, fr.width) != (h, w):
                raise VideoDataError(f"{f} has size {fr.height}x{fr.width}, expected {h}x{w}")
        return FrameSequence(frames)
    if layout == "planar_yuv420":
        if not path.exists():
            raise VideoDataError(f"{path} does not exist")
        return _load_yuv_sequence(path)
    raise VideoDataError(f"unknown layout {layout!r}")


def slice_gops(seq: FrameSequence, n: int) -> list[Gop]:
    """Split into consecutive GOPs of n frames; a short trailing GOP is kept."""
    if n < 1:
        raise VideoDataError(f"GOP length must be >= 1, got {n}")
    return [Gop(seq.frames[i : i + n]) for i in range(0, len(seq.frames), n)]


def random_crop_pair(frames: list[Frame], size: int, seed: int) -> list[Frame]:
    """Crop the same seeded spatial window out of every frame in the list."""
    if not frames:
        return []
    h, w = frames[0].height, frames[0].width
    if h < size or w < size:
        raise VideoDataError(f"frames of size {h}x{w} cannot be cropped to {size}x{size}")
    rng = random.Random(seed)
    top = rng.randint(0, h - size)
    left = rng.randint(0, w - size)
    return [Frame(f.pixels[:, top : top + size, left : left + size].clone()) for f in frames]


def pad_to_multiple(frame: Frame, multiple: int = 64) -> tuple[Frame, tuple[int, int]]:
    """Edge-replicate pad so H and W are multiples of `multiple`.

    Returns the padded frame and the original (H, W) for cropping back.
    """
    h, w = frame.height, frame.width
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return frame, (h, w)
    padded = torch.nn.functional.pad(frame.pixels.unsqueeze(0), (0, pw, 0, ph), mode="replicate")
    return Frame(padded.squeeze(0)), (h, w)


def crop_back(frame: Frame, orig_size: tuple[int, int]) -> Frame:
    h, w = orig_size
    return Frame(frame.pixels[:, :h, :w].clone())


@dataclass
class SquareSpec:
    top: int
    left: int
    size: int
    color: np.ndarray
    texture: np.ndarray = field(repr=False)


def moving_square_layout(
    count: int, n_frames: int, size: tuple[int, int], velocity: tuple[int, int], seed: int
) -> list[SquareSpec]:
    """Deterministic square placement shared by the generator and test oracles.

    Squares are placed without overlap and so that start + t*velocity stays in
    frame for every t < n_frames.
    """
    h, w = size
    dy, dx = velocity
    rng = np.random.default_rng(seed)
    total_dy, total_dx = dy * (n_frames - 1), dx * (n_frames - 1)
    squares: list[SquareSpec] = []
    for _ in range(count):
        side = int(rng.integers(max(6, h // 8), max(8, h // 4) + 1))
        lo_t, hi_t = max(0, -total_dy), min(h - side, h - side - total_dy)
        lo_l, hi_l = max(0, -total_dx), min(w - side, w - side - total_dx)
        if hi_t < lo_t or hi_l < lo_l:
            raise VideoDataError(
                f"velocity {velocity} over {n_frames} frames leaves no room for a {side}px square"
            )
        placed = False
        for _attempt in range(200):
            top = int(rng.integers(lo_t, hi_t + 1))
            left = int(rng.integers(lo_l, hi_l + 1))
            clear = all(
                top + side <= s.top
                or s.top + s.size <= top
                or left + side <= s.left
                or s.left + s.size <= left
                for s in squares
            )
            if clear:
                placed = True
                break
        if not placed:
            raise VideoDataError(f"could not place {count} non-overlapping squares in {h}x{w}")
        color = rng.uniform(0.2, 0.85, size=3)
        texture = rng.uniform(-0.08, 0.08, size=(3, side, side))
        squares.append(SquareSpec(top, left, side, color, texture))
    return squares


def synth_moving_squares(
    count: int,
    n_frames: int,
    size: tuple[int, int],
    velocity: tuple[int, int],
    seed: int,
) -> FrameSequence:
    """Textured squares translating rigidly over a static textured background.

    Ground-truth flow inside each square support is exactly `velocity`
    (dy, dx) pixels/frame; the background is static.
    """
    h, w = size
    dy, dx = velocity
    rng = np.random.default_rng(seed + 1)
    coarse = rng.uniform(0.15, 0.75, size=(3, max(2, h // 8), max(2, w // 8)))
    bg = (
        torch.nn.functional.interpolate(
            torch.from_numpy(coarse).unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
        )
        .squeeze(0)
        .numpy()
    )
    squares = moving_square_layout(count, n_frames, size, velocity, seed)
    frames = []
    for t in range(n_frames):
        img = bg.copy()
        for s in squares:
            top, left = s.top + t * dy, s.left + t * dx
            patch = np.clip(s.color[:, None, None] + s.texture, 0.05, 0.95)
            img[:, top : top + s.size, left : left + s.size] = patch
        frames.append(_frame_from_array(np.clip(img, 0.0, 1.0)))
    return FrameSequence(frames)


def square_support_mask(
    count: int, n_frames: int, size: tuple[int, int], velocity: tuple[int, int], seed: int, t: int
) -> torch.Tensor:
    """Boolean (H, W) mask of pixels covered by any square at frame t."""
    h, w = size
    dy, dx = velocity
    mask = torch.zeros(h, w, dtype=torch.bool)
    for s in moving_square_layout(count, n_frames, size, velocity, seed):
        top, left = s.top + t * dy, s.left + t * dx
        mask[top : top + s.size, left : left + s.size] = True
    return mask


def write_sequence(seq: FrameSequence, out_dir: str | Path) -> list[Path]:
    """Emit the standard PNG layout `<out_dir>/frame_%05d.png`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(seq.frames):
        p = out / f"frame_{i:05d}.png"
        save_png_frame(f, p)
        paths.append(p)
    return paths
