"""Desk-scale quality and efficiency measurements: frame-marginal MMD on random
projections, degradation-over-time curves, chunk-boundary discontinuity, and
latency/throughput benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

PROJECTION_DIM = 64


def _project(frames: np.ndarray, seed: int) -> np.ndarray:
    """Fixed Gaussian random projection of flattened frames to PROJECTION_DIM."""
    flat = frames.reshape(frames.shape[0], -1).astype(np.float64)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((flat.shape[1], PROJECTION_DIM)) / np.sqrt(flat.shape[1])
    return flat @ proj


def frame_marginal_mmd(samples: np.ndarray, reference: np.ndarray, seed: int = 0) -> float:
    """Unbiased RBF-kernel MMD^2 between two frame sets, clamped at 0.

    Features are a fixed random projection (seeded), bandwidth is the median
    heuristic over the pooled pairwise distances. Symmetric in its arguments.
    """
    if samples.shape[0] < 100 or reference.shape[0] < 100:
        raise ValueError("need at least 100 frames on each side")
    x = _project(samples, seed)
    y = _project(reference, seed)
    z = np.concatenate([x, y], axis=0)
    sq = (z**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * (z @ z.T)
    np.maximum(d2, 0, out=d2)
    off = d2[~np.eye(len(z), dtype=bool)]
    bandwidth = np.median(off)
    if bandwidth <= 0:
        bandwidth = 1.0
    k = np.exp(-d2 / bandwidth)
    n, m = len(x), len(y)
    kxx = k[:n, :n]
    kyy = k[n:, n:]
    kxy = k[:n, n:]
    term_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    mmd2 = term_x + term_y - 2 * kxy.mean()
    return float(max(mmd2, 0.0))


def degradation_curve(stream_chunks: list[np.ndarray], reference_per_index: list[np.ndarray],
                      seed: int = 0) -> list[float]:
    """Per-chunk-index MMD of a long stream against the data's per-index frame
    marginal; indices beyond the reference length wrap modulo its length
    (class dynamics are phase-stationary, so the wrapped marginal matches)."""
    if not reference_per_index:
        raise ValueError("reference_per_index must be non-empty")
    curve = []
    for i, chunk_frames in enumerate(stream_chunks):
        ref = reference_per_index[i % len(reference_per_index)]
        curve.append(frame_marginal_mmd(chunk_frames, ref, seed=seed))
    return curve


def curve_slope(curve: list[float]) -> float:
    """Least-squares slope of value against chunk index."""
    y = np.asarray(curve, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])


def boundary_discontinuity(video: np.ndarray, chunk_frames: int) -> float:
    """Mean |frame difference| across chunk boundaries over the same within
    chunks. A constant video (0/0) returns 1.0 by convention."""
    n = video.shape[0]
    if n // chunk_frames < 2:
        raise ValueError("need at least 2 chunks")
    diffs = np.abs(np.diff(video.astype(np.float64), axis=0)).mean(axis=tuple(range(1, video.ndim)))
    at_boundary = np.array([(i + 1) % chunk_frames == 0 for i in range(n - 1)])
    cross = diffs[at_boundary].mean() if at_boundary.any() else 0.0
    within = diffs[~at_boundary].mean() if (~at_boundary).any() else 0.0
    if within == 0.0 and cross == 0.0:
        return 1.0
    if within == 0.0:
        return float("inf")
    return float(cross / within)


def bench_latency_throughput(session_factory, n_chunks: int = 20, runs: int = 5,
                             window_chunks: int | None = None) -> dict:
    """Median wall-clock time-to-first-chunk and steady-state frames/second.

    `session_factory()` must return a fresh generation session; sessions are
    driven for `n_chunks` chunks with sliding-window rebases at `window_chunks`.
    """
    ttfc, fps = [], []
    for _ in range(runs):
        session = session_factory()
        t0 = time.perf_counter()
        first = session.generate_chunk()
        ttfc.append(time.perf_counter() - t0)
        frames = first.shape[1]
        t1 = time.perf_counter()
        produced = 0
        for i in range(1, n_chunks):
            if window_chunks and session.cache.committed_chunks >= window_chunks:
                session.extend_sliding_window(context_chunks=1)
            chunk = session.generate_chunk()
            produced += chunk.shape[0] * chunk.shape[1] if chunk.ndim > 4 else chunk.shape[1]
        elapsed = time.perf_counter() - t1
        fps.append(produced / elapsed)
        frames += produced
    return {
        "latency_to_first_chunk_s": float(np.median(ttfc)),
        "throughput_fps": float(np.median(fps)),
        "chunks_per_run": n_chunks,
        "runs": runs,
    }


@dataclass
class MetricReport:
    """Key-value metrics document; text round-trips exactly via repr floats."""

    mmd_per_condition: dict[int, float] = field(default_factory=dict)
    degradation: list[float] = field(default_factory=list)
    boundary_discontinuity: float = 0.0
    latency_to_first_chunk_s: float = 0.0
    throughput_fps: float = 0.0
    seed: int = 0
    config_hash: str = ""
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        values = [*self.mmd_per_condition.values(), *self.degradation,
                  self.boundary_discontinuity, self.latency_to_first_chunk_s,
                  self.throughput_fps, *self.extras.values()]
        if not np.all(np.isfinite(values)):
            raise ValueError("metric report contains non-finite values")

    @property
    def mmd_mean(self) -> float:
        if not self.mmd_per_condition:
            return 0.0
        return float(np.mean(list(self.mmd_per_condition.values())))

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"config_hash = {self.config_hash}"]
        for cond in sorted(self.mmd_per_condition):
            lines.append(f"mmd_cond_{cond} = {self.mmd_per_condition[cond]!r}")
        lines.append("degradation = " + ",".join(repr(v) for v in self.degradation))
        lines.append(f"boundary_discontinuity = {self.boundary_discontinuity!r}")
        lines.append(f"latency_to_first_chunk_s = {self.latency_to_first_chunk_s!r}")
        lines.append(f"throughput_fps = {self.throughput_fps!r}")
        for key in sorted(self.extras):
            lines.append(f"extra_{key} = {self.extras[key]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            kv[key.strip()] = value.strip()
        mmd = {int(k.split("_")[-1]): float(v) for k, v in kv.items() if k.startswith("mmd_cond_")}
        degradation = [float(v) for v in kv.get("degradation", "").split(",") if v]
        return cls(
            mmd_per_condition=mmd,
            degradation=degradation,
            boundary_discontinuity=float(kv.get("boundary_discontinuity", 0.0)),
            latency_to_first_chunk_s=float(kv.get("latency_to_first_chunk_s", 0.0)),
            throughput_fps=float(kv.get("throughput_fps", 0.0)),
            seed=int(kv.get("seed", 0)),
            config_hash=kv.get("config_hash", ""),
            extras={k[len("extra_"):]: float(v) for k, v in kv.items() if k.startswith("extra_")},
        )

    def degradation_csv(self) -> str:
        return "chunk,value\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(self.degradation)) + "\n"
