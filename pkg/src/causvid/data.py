"""Procedural tiny videos and the CVDS dataset container.

Each condition class renders a soft blob with class-specific dynamics on a
toroidal canvas. Motions are phase-randomized so the per-frame-index marginal
of each class is stationary, and every class is Markovian in at most two
frames. Pixel values live in [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

CLASS_NAMES = ("bounce", "drift_right", "orbit", "grow")
DATASET_MAGIC = b"CVDS"
DATASET_VERSION = 1
BACKGROUND = -0.2  # empty-canvas pixel value; blobs peak at 1.0


@dataclass(frozen=True)
class SceneSpec:
    """A condition class plus canvas geometry and motion-parameter bounds.

    Concrete motion parameters (start position, speed, phase, radius) are
    drawn from these bounds by the render seed, so (spec, seed) pins a video.
    """

    condition_id: int
    n_frames: int = 20
    height: int = 16
    width: int = 16
    channels: int = 1
    speed: tuple[float, float] = (1.05, 2.0)   # px/frame for translating classes
    radius: tuple[float, float] = (1.6, 2.4)   # blob sigma in px
    orbit_radius: tuple[float, float] = (3.5, 5.0)
    pulse: tuple[float, float] = (0.8, 1.6)    # radius swing for "grow"

    def __post_init__(self):
        if not 0 <= self.condition_id < len(CLASS_NAMES):
            raise ValueError(f"condition_id must be in [0, {len(CLASS_NAMES)}), got {self.condition_id}")
        if self.channels != 1:
            raise ValueError("only single-channel scenes are supported")


def _blob(h: int, w: int, cx: np.ndarray, cy: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Toroidal Gaussian blobs: (F, H, W) intensities in [0, 1]."""
    ys = np.arange(h)[None, :, None]
    xs = np.arange(w)[None, None, :]
    dy = np.abs(ys - cy[:, None, None])
    dx = np.abs(xs - cx[:, None, None])
    dy = np.minimum(dy, h - dy)
    dx = np.minimum(dx, w - dx)
    return np.exp(-(dx**2 + dy**2) / (2 * r[:, None, None] ** 2))


def render_video(spec: SceneSpec, seed: int, static: bool = False) -> np.ndarray:
    """Render one video (N, H, W, C) float32 in [-1, 1], deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    n, h, w = spec.n_frames, spec.height, spec.width
    t = np.arange(n, dtype=np.float64)
    r = np.full(n, rng.uniform(*spec.radius))
    if spec.condition_id == 0:  # bounce: vertical triangle wave, fixed column
        cx = np.full(n, rng.uniform(0, w))
        v = rng.uniform(*spec.speed) * rng.choice([-1.0, 1.0])
        y0, span = rng.uniform(0, h), float(h)
        cy = np.abs(((y0 + v * t) % (2 * span)) - span)
    elif spec.condition_id == 1:  # drift_right: strictly increasing x until wrap
        cy = np.full(n, rng.uniform(0, h))
        cx = (rng.uniform(0, w) + rng.uniform(*spec.speed) * t) % w
    elif spec.condition_id == 2:  # orbit around the canvas center
        rad = rng.uniform(*spec.orbit_radius)
        omega = rng.uniform(0.35, 0.65) * rng.choice([-1.0, 1.0])
        phase = rng.uniform(0, 2 * np.pi)
        cx = w / 2 + rad * np.cos(phase + omega * t)
        cy = h / 2 + rad * np.sin(phase + omega * t)
    else:  # grow: stationary blob with pulsing radius
        cx = np.full(n, rng.uniform(0, w))
        cy = np.full(n, rng.uniform(0, h))
        swing = rng.uniform(*spec.pulse)
        phase = rng.uniform(0, 2 * np.pi)
        omega = rng.uniform(0.35, 0.65)
        r = r + swing * np.sin(phase + omega * t)
        r = np.clip(r, 0.6, None)
    if static:
        cx, cy, r = cx[:1].repeat(n), cy[:1].repeat(n), r[:1].repeat(n)
    frames = _blob(h, w, cx, cy, r)
    # Lifted background keeps the dataset's pixel mean near zero, which the
    # eps-parameterized teacher needs for usable denoising estimates at high t.
    video = (BACKGROUND + (1.0 - BACKGROUND) * np.clip(frames, 0.0, 1.0)).astype(np.float32)
    return video[..., None]


def centroid_x_circular(video: np.ndarray) -> np.ndarray:
    """Per-frame horizontal centroid via circular mean, unwrapped; robust to wrap."""
    w = video.shape[2]
    mass = (video[..., 0] + 1.0) / 2.0
    angles = 2 * np.pi * np.arange(w) / w
    col_mass = mass.sum(axis=1)
    sin = (col_mass * np.sin(angles)).sum(axis=1)
    cos = (col_mass * np.cos(angles)).sum(axis=1)
    theta = np.unwrap(np.arctan2(sin, cos))
    return theta * w / (2 * np.pi)


def mean_frame_features(video: np.ndarray) -> np.ndarray:
    """Translation-robust features of the time-averaged frame.

    [std of the column profile, std of the row profile, temporal mass std];
    the four classes land in distinct regions of this space.
    """
    mass = (video[..., 0] + 1.0) / 2.0
    mean_frame = mass.mean(axis=0)
    col_profile = mean_frame.sum(axis=0)
    row_profile = mean_frame.sum(axis=1)
    mass_series = mass.sum(axis=(1, 2))
    return np.array([col_profile.std(), row_profile.std(), mass_series.std()], dtype=np.float64)


@dataclass(frozen=True)
class DataConfig:
    n_videos: int = 400
    n_frames: int = 20
    height: int = 16
    width: int = 16
    channels: int = 1
    n_classes: int = len(CLASS_NAMES)
    static_fraction: float = 0.0  # images-as-videos augmentation, off by default

    def __post_init__(self):
        if self.n_videos % self.n_classes:
            raise ValueError("n_videos must be divisible by the class count for balance")
        if not 0 <= self.static_fraction < 1:
            raise ValueError("static_fraction must be in [0, 1)")


class Dataset:
    """In-memory dataset handle with seeded uniform batch sampling."""

    def __init__(self, videos: np.ndarray, conds: np.ndarray):
        if videos.ndim != 5:
            raise ValueError("videos must be (num, N, H, W, C)")
        self.videos = np.ascontiguousarray(videos, dtype=np.float32)
        self.conds = np.ascontiguousarray(conds, dtype=np.uint32)

    def __len__(self) -> int:
        return self.videos.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.videos.shape[2:]

    @property
    def n_frames(self) -> int:
        return self.videos.shape[1]

    def sample_indices(self, batch_size: int, generator: torch.Generator) -> torch.Tensor:
        return torch.randint(0, len(self), (batch_size,), generator=generator)

    def sample_batch(self, batch_size: int, generator: torch.Generator,
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self.sample_indices(batch_size, generator)
        x0 = torch.from_numpy(self.videos[idx.numpy()])
        cond = torch.from_numpy(self.conds[idx.numpy()].astype(np.int64))
        return x0, cond

    def frames_of_condition(self, cond: int) -> np.ndarray:
        """All frames of one class pooled: (num*N, H, W, C)."""
        vids = self.videos[self.conds == cond]
        return vids.reshape(-1, *self.frame_shape)

    def chunk_frames_of_condition(self, cond: int, chunk: int, k: int) -> np.ndarray:
        """Frames of one chunk index for one class: (num*k, H, W, C)."""
        vids = self.videos[self.conds == cond][:, chunk * k:(chunk + 1) * k]
        return vids.reshape(-1, *self.frame_shape)


def generate_dataset(config: DataConfig, seed: int) -> Dataset:
    """Render a class-balanced dataset, deterministic in (config, seed)."""
    per_class = config.n_videos // config.n_classes
    videos = np.empty((config.n_videos, config.n_frames, config.height, config.width,
                       config.channels), dtype=np.float32)
    conds = np.empty(config.n_videos, dtype=np.uint32)
    n_static = int(round(config.static_fraction * per_class))
    i = 0
    for cls in range(config.n_classes):
        spec = SceneSpec(cls, config.n_frames, config.height, config.width)
        for j in range(per_class):
            videos[i] = render_video(spec, seed=seed * 1_000_003 + i, static=j < n_static)
            conds[i] = cls
            i += 1
    return Dataset(videos, conds)


def save_dataset(dataset: Dataset, path) -> None:
    num, n, h, w, c = dataset.videos.shape
    try:
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<6I", DATASET_VERSION, num, n, h, w, c))
            for i in range(num):
                f.write(struct.pack("<I", int(dataset.conds[i])))
                f.write(dataset.videos[i].astype("<f4").tobytes())
    except OSError as e:
        raise OSError(f"failed writing dataset container {path}: {e}") from e


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"failed reading dataset container {path}: {e}") from e
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"bad container: {path} does not start with CVDS magic")
    version, num, n, h, w, c = struct.unpack_from("<6I", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"bad container: unsupported version {version}")
    frame_bytes = n * h * w * c * 4
    expected = 28 + num * (4 + frame_bytes)
    if len(data) != expected:
        raise ValueError(f"bad container: expected {expected} bytes, found {len(data)}")
    videos = np.empty((num, n, h, w, c), dtype=np.float32)
    conds = np.empty(num, dtype=np.uint32)
    off = 28
    for i in range(num):
        (conds[i],) = struct.unpack_from("<I", data, off)
        off += 4
        videos[i] = np.frombuffer(data, dtype="<f4", count=n * h * w * c, offset=off).reshape(n, h, w, c)
        off += frame_bytes
    if not np.all(np.isfinite(videos)):
        raise ValueError("bad container: non-finite pixel values")
    if videos.min() < -1.0 or videos.max() > 1.0:
        raise ValueError("bad container: pixel values outside [-1, 1]")
    return Dataset(videos, conds)
