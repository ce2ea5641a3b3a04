"""Clip extraction, augmentation, on-disk splits and the synthetic motion set.

Frames travel as ``[n, H, W, 3]`` arrays, either uint8 or float in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from . import rng
from .container import atomic_write
from .errors import ConfigError, DataError, ImageError
from .tensor import Tensor

# Per-channel statistics of the Kinetics-pretrained reference models.
KINETICS_MEAN = (0.43216, 0.394666, 0.37645)
KINETICS_STD = (0.22803, 0.22145, 0.216989)

DIRECTIONS = ("up", "down", "left", "right")
_STEPS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


@dataclass
class RawVideo:
    id: str
    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"video {self.id!r}: frames must be [n, H, W, 3], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError(f"video {self.id!r} has no frames")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ClipTensor:
    data: Tensor
    video_id: str
    start: int

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class PipelineConfig:
    max_frames: int = 48
    min_frames: int = 32
    clip_len: int = 16
    resize: int = 256
    crop: int = 224
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    flip_p: float = 0.5
    mean: tuple[float, float, float] = KINETICS_MEAN
    std: tuple[float, float, float] = KINETICS_STD
    eval_clips: int = 3
    shuffle_frames: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.min_frames < self.clip_len:
            raise ConfigError("min_frames must be >= clip_len")
        if self.resize < self.crop:
            raise ConfigError("resize must be >= crop")
        if self.max_frames < 2 or self.clip_len < 1:
            raise ConfigError("max_frames must be >= 2 and clip_len >= 1")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError("flip_p must lie in [0, 1]")

    @classmethod
    def desk(cls, clip_len: int = 8, side: int = 32, **kw) -> "PipelineConfig":
        """Small-scale settings: no resize, no flip (flips would swap the
        left/right motion classes of the synthetic set)."""
        kw.setdefault("flip_p", 0.0)
        return cls(clip_len=clip_len, resize=side, crop=side, **kw)


# -- temporal ----------------------------------------------------------

def cap_indices(n: int, max_frames: int = 48) -> np.ndarray:
    """Indices kept by :func:`cap_frames`: all of them when ``n <= max``,
    else ``round(i * (n-1) / (max-1))`` for ``i < max`` (halves round up)."""
    if n <= max_frames:
        return np.arange(n)
    i = np.arange(max_frames, dtype=np.int64)
    den = max_frames - 1
    return (2 * i * (n - 1) + den) // (2 * den)


def cap_frames(frames, max_frames: int = 48) -> np.ndarray:
    frames = np.asarray(frames.frames if isinstance(frames, RawVideo) else frames)
    if len(frames) == 0:
        raise DataError("cannot cap an empty video")
    return frames[cap_indices(len(frames), max_frames)]


def pad_min(frames, min_frames: int = 32) -> np.ndarray:
    """Repeat the last frame until there are at least ``min_frames``."""
    frames = np.asarray(frames)
    n = len(frames)
    if n == 0:
        raise DataError("cannot pad an empty video")
    if n >= min_frames:
        return frames
    tail = np.repeat(frames[-1:], min_frames - n, axis=0)
    return np.concatenate([frames, tail], axis=0)


def sample_clip(frames, clip_len: int, gen: np.random.Generator) -> tuple[int, np.ndarray]:
    """``clip_len`` consecutive frames from a uniformly drawn start."""
    frames = np.asarray(frames)
    n = len(frames)
    if n < clip_len:
        raise DataError(f"need at least {clip_len} frames, got {n}")
    start = int(gen.integers(0, n - clip_len + 1))
    return start, frames[start : start + clip_len]


# -- spatial -----------------------------------------------------------

def _to_unit(frames: np.ndarray) -> np.ndarray:
    if frames.dtype == np.uint8:
        return frames.astype(np.float32) / np.float32(255.0)
    return frames.astype(np.float32, copy=False)


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of every frame to ``size x size``."""
    if frames.shape[1] < 1 or frames.shape[2] < 1:
        raise ImageError(f"degenerate frame size {frames.shape[1:3]}")
    if frames.shape[1] == size and frames.shape[2] == size:
        return frames
    return np.stack(
        [cv2.resize(f, (size, size), interpolation=cv2.INTER_LINEAR) for f in frames]
    )


def center_crop(frames: np.ndarray, size: int) -> np.ndarray:
    h, w = frames.shape[1:3]
    if h < size or w < size:
        raise ImageError(f"cannot crop {size}x{size} from {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return frames[:, top : top + size, left : left + size]


def _gray(frames: np.ndarray) -> np.ndarray:
    return frames[..., 0] * 0.299 + frames[..., 1] * 0.587 + frames[..., 2] * 0.114


def color_jitter(frames: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Brightness, contrast, then saturation factors, shared by all frames."""
    x = frames * brightness
    x = np.clip(x, 0, 1)
    x = (x - _gray(x).mean()) * contrast + _gray(x).mean()
    x = np.clip(x, 0, 1)
    g = _gray(x)[..., None]
    x = (x - g) * saturation + g
    return np.clip(x, 0, 1).astype(np.float32)


def normalize(frames: np.ndarray, mean, std) -> np.ndarray:
    """[T, H, W, 3] in [0, 1] -> [3, T, H, W] standardised per channel."""
    m = np.asarray(mean, dtype=np.float32)
    s = np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(((frames - m) / s).transpose(3, 0, 1, 2))


def _spatial(frames, cfg: PipelineConfig) -> np.ndarray:
    x = _to_unit(np.asarray(frames))
    return center_crop(resize_frames(x, cfg.resize), cfg.crop)


def train_transform(frames, cfg: PipelineConfig, gen: np.random.Generator) -> np.ndarray:
    """Resize, center crop, one jitter draw and one flip draw for the whole
    clip, normalise.  Returns ``[3, T, crop, crop]`` float32."""
    x = _spatial(frames, cfg)
    b, c, s = (gen.uniform(1 - v, 1 + v) for v in (cfg.brightness, cfg.contrast, cfg.saturation))
    flip = gen.random() < cfg.flip_p
    if (cfg.brightness, cfg.contrast, cfg.saturation) != (0, 0, 0):
        x = color_jitter(x, b, c, s)
    if flip:
        x = x[:, :, ::-1]
    return normalize(x, cfg.mean, cfg.std)


def eval_transform(frames, cfg: PipelineConfig) -> np.ndarray:
    return normalize(_spatial(frames, cfg), cfg.mean, cfg.std)


def _prepare(video: RawVideo, cfg: PipelineConfig) -> np.ndarray:
    return pad_min(cap_frames(video.frames, cfg.max_frames), cfg.min_frames)


def _maybe_shuffle(clip: np.ndarray, cfg: PipelineConfig, gen: np.random.Generator) -> np.ndarray:
    return clip[gen.permutation(len(clip))] if cfg.shuffle_frames else clip


def train_sample(video: RawVideo, cfg: PipelineConfig, gen: np.random.Generator) -> ClipTensor:
    """Full training path for one video: cap, pad, sample, augment."""
    start, clip = sample_clip(_prepare(video, cfg), cfg.clip_len, gen)
    clip = _maybe_shuffle(clip, cfg, gen)
    return ClipTensor(Tensor(train_transform(clip, cfg, gen)), video.id, start)


def eval_clips(video: RawVideo, cfg: PipelineConfig, gen: np.random.Generator) -> list[ClipTensor]:
    """``cfg.eval_clips`` independently started clips, no spatial augmentation."""
    frames = _prepare(video, cfg)
    out = []
    for _ in range(cfg.eval_clips):
        start, clip = sample_clip(frames, cfg.clip_len, gen)
        clip = _maybe_shuffle(clip, cfg, gen)
        out.append(ClipTensor(Tensor(eval_transform(clip, cfg)), video.id, start))
    return out


# -- splits on disk ----------------------------------------------------

@dataclass
class SplitManifest:
    entries: list[tuple[str, int]]
    name: str = "train"
    class_names: list[str] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        labels = {label for _, label in self.entries}
        if labels and labels != set(range(max(labels) + 1)):
            raise DataError(f"labels are not contiguous from 0: {sorted(labels)}")
        if not self.class_names:
            self.class_names = [str(i) for i in range(len(labels))]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.entries]

    def __len__(self):
        return len(self.entries)


def write_manifest(manifest: SplitManifest, path, header: str = "") -> None:
    lines = "".join(f"{p}\t{label}\n" for p, label in manifest.entries)
    atomic_write(path, header + lines)


def read_manifest(path, name: str | None = None) -> SplitManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        rel, sep, label = line.rpartition("\t")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'path<TAB>label'")
        entries.append((rel, int(label)))
    classes_file = path.parent / "classes.txt"
    names = classes_file.read_text(encoding="utf-8").split() if classes_file.is_file() else []
    return SplitManifest(entries, name or path.stem, names, path.parent)


def write_video_dir(video: RawVideo, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = video.frames
    if frames.dtype != np.uint8:
        frames = np.clip(np.rint(frames * 255), 0, 255).astype(np.uint8)
    for k, frame in enumerate(frames):
        Image.fromarray(frame, "RGB").save(directory / f"frame_{k:05d}.png", optimize=False)


def read_video_dir(directory, video_id: str | None = None) -> RawVideo:
    directory = Path(directory)
    files = sorted(directory.glob("*.png"))
    if not files:
        raise DataError(f"no PNG frames in {directory}")
    frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    return RawVideo(video_id or directory.name, frames)


def load_split(manifest: SplitManifest) -> list[tuple[RawVideo, int]]:
    """Load every video; ids are the resolved directory paths, so videos
    from different manifests never share an id."""
    root = manifest.root or Path(".")
    return [
        (read_video_dir(root / rel, str((root / rel).resolve())), label)
        for rel, label in manifest.entries
    ]


def stratified_holdout(
    entries: Sequence[tuple[str, int]], fraction: float = 0.2, seed: int = 0
) -> tuple[list[tuple[str, int]], list[tuple[str, int]]]:
    """Split entries so each class contributes ``round(fraction * n_c)``
    items to the held-out part."""
    gen = rng.stream(seed, rng.ORDER, 1 << 20)
    by_class: dict[int, list[int]] = {}
    for i, (_, label) in enumerate(entries):
        by_class.setdefault(label, []).append(i)
    held: set[int] = set()
    for label in sorted(by_class):
        idx = by_class[label]
        k = int(round(fraction * len(idx)))
        held.update(idx[j] for j in gen.permutation(len(idx))[:k])
    train = [e for i, e in enumerate(entries) if i not in held]
    val = [e for i, e in enumerate(entries) if i in held]
    return train, val


# -- synthetic motion set ----------------------------------------------

def synth_video(direction: str, side: int, frames: int, gen: np.random.Generator,
                speed: int | None = None, square: int | None = None) -> np.ndarray:
    """A bright square drifting over static noise texture, wrapping around
    the borders so its position is uniform in every frame."""
    speed = speed or max(1, side // 16)
    square = square or max(3, side // 6)
    texture = gen.integers(0, 128, size=(side, side, 3))
    y0, x0 = gen.integers(0, side, size=2)
    color = gen.integers(200, 256, size=3)
    dy, dx = _STEPS[direction]
    out = np.empty((frames, side, side, 3), dtype=np.uint8)
    offsets = np.arange(square)
    for t in range(frames):
        frame = texture.copy()
        rows = (y0 + dy * speed * t + offsets) % side
        cols = (x0 + dx * speed * t + offsets) % side
        frame[np.ix_(rows, cols)] = color
        out[t] = frame
    return out


def synth_motion_dataset(
    classes: int = 4,
    per_class: int = 50,
    side: int = 32,
    frames: int = 32,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    name: str = "train",
    header: str = "",
) -> tuple[SplitManifest, list[RawVideo]]:
    """Balanced set whose label is the motion direction of the square.

    When ``out_dir`` is given the videos are written as PNG directories
    with ``manifest.txt`` and ``classes.txt`` alongside.
    """
    if not 1 <= classes <= len(DIRECTIONS):
        raise ConfigError(f"classes must lie in [1, {len(DIRECTIONS)}]")
    if side < 16 or frames < 8:
        raise ConfigError("synthetic videos need side >= 16 and frames >= 8")
    entries, videos = [], []
    for c in range(classes):
        for i in range(per_class):
            vid = f"videos/{DIRECTIONS[c]}_{i:04d}"
            gen = rng.stream(seed, rng.SYNTH, c, i)
            videos.append(RawVideo(vid, synth_video(DIRECTIONS[c], side, frames, gen)))
            entries.append((vid, c))
    manifest = SplitManifest(entries, name, list(DIRECTIONS[:classes]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for v in videos:
            write_video_dir(v, out / v.id)
        write_manifest(manifest, out / "manifest.txt", header)
        atomic_write(out / "classes.txt", "\n".join(manifest.class_names) + "\n")
        manifest = replace(manifest, root=out)
    return manifest, videos
