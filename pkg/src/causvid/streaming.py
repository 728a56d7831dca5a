"""Few-step chunk-by-chunk generation with KV caching: streaming sessions,
sliding-window extension past the training horizon, image-to-video bootstrap,
one-step video-to-video translation, and mid-stream condition switching."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass

import torch

from .model import CausalDiT, KVCache
from .schedule import INFERENCE_TIMESTEPS, NoiseSchedule, build_schedule, forward_diffuse


@dataclass
class ChunkRecord:
    index: int
    condition_id: int
    wall_ms: float


class GenerationSession:
    """One autoregressive generation stream over a KV cache.

    Owned by a single consumer; chunks are emitted strictly in order and all
    noise comes from one seeded generator, so a fixed (seed, condition
    schedule) pins the stream bit-exactly. `batch` > 1 generates that many
    independent streams in lockstep under a shared condition schedule.
    """

    def __init__(self, model: CausalDiT, chunk_frames: int, condition_id: int, seed: int = 0,
                 timesteps: tuple[int, ...] = INFERENCE_TIMESTEPS,
                 sched: NoiseSchedule | None = None, batch: int = 1,
                 max_context_chunks: int = 8):
        if model.config.predicts != "x0":
            raise ValueError("streaming generation needs a clean-frame-predicting model")
        if not timesteps or any(b >= a for a, b in zip(timesteps, timesteps[1:])):
            raise ValueError("timesteps must be strictly descending")
        if timesteps[-1] <= 0:
            raise ValueError("timesteps must stay above 0 (t=0 is the commit pass)")
        self.model = model
        self.sched = sched or build_schedule(model.config.T)
        self.layout_k = chunk_frames
        self.timesteps = tuple(timesteps)
        self.batch = batch
        self.cache: KVCache = model.make_cache(chunk_frames)
        self.rng = torch.Generator().manual_seed(seed)
        self.chunk_index = 0  # next chunk to emit
        self._condition = int(condition_id)
        self._check_condition(self._condition)
        self.records: list[ChunkRecord] = []
        self._recent_clean: deque[torch.Tensor] = deque(maxlen=max_context_chunks)
        self._denoising = False  # True while a chunk's denoising is in flight

    def _check_condition(self, cond: int):
        if not 0 <= cond < self.model.config.cond_vocab - 1:
            raise ValueError(f"unknown condition id {cond}")

    def _cond_tensor(self) -> torch.Tensor:
        return torch.full((self.batch,), self._condition, dtype=torch.long)

    def _frame_shape(self) -> tuple[int, ...]:
        cfg = self.model.config
        return (self.batch, self.layout_k, cfg.frame_h, cfg.frame_w, cfg.channels)

    def set_condition(self, condition_id: int) -> int:
        """Switch the condition; effective from the next chunk whose denoising
        has not begun. Returns that chunk index. Last write wins."""
        self._check_condition(int(condition_id))
        self._condition = int(condition_id)
        return self.chunk_index + (1 if self._denoising else 0)

    def _commit(self, clean: torch.Tensor, cond: torch.Tensor, wall_start: float):
        self.model.commit_chunk(self.cache, clean, cond, expect_index=self.cache.committed_chunks)
        self._recent_clean.append(clean.detach().clone())
        self.records.append(ChunkRecord(self.chunk_index, int(cond[0]),
                                        (time.perf_counter() - wall_start) * 1e3))
        self.chunk_index += 1

    def generate_chunk(self) -> torch.Tensor:
        """Q denoising passes from pure noise with fresh re-noising each step,
        then a commit pass at t=0. Returns the clean chunk (B, k, H, W, C)."""
        t0 = time.perf_counter()
        self._denoising = True
        try:
            cond = self._cond_tensor()
            x = torch.randn(self._frame_shape(), generator=self.rng)
            with torch.no_grad():
                for j, t in enumerate(self.timesteps):
                    x_hat, _ = self.model.forward_incremental(self.cache, x, t, cond)
                    if not torch.all(torch.isfinite(x_hat)):
                        raise RuntimeError(f"non-finite prediction at chunk {self.chunk_index}, t={t}")
                    if j + 1 < len(self.timesteps):
                        t_next = self.timesteps[j + 1]
                        eps = torch.randn(self._frame_shape(), generator=self.rng)
                        x = forward_diffuse(x_hat, t_next, eps, self.sched)
                    else:
                        x = x_hat
                self._commit(x, cond, t0)
        finally:
            self._denoising = False
        return x.detach().clone()

    def inject_image(self, image: torch.Tensor) -> torch.Tensor:
        """Commit a chunk made of the given frame repeated k times, bypassing
        denoising; image-to-video when called on a fresh session."""
        cfg = self.model.config
        if tuple(image.shape) != (cfg.frame_h, cfg.frame_w, cfg.channels):
            raise ValueError(f"image shape {tuple(image.shape)} does not match frames "
                             f"({cfg.frame_h}, {cfg.frame_w}, {cfg.channels})")
        t0 = time.perf_counter()
        chunk = image[None, None].expand(self._frame_shape()).contiguous()
        with torch.no_grad():
            self._commit(chunk, self._cond_tensor(), t0)
        return chunk.detach().clone()

    def video_to_video_chunk(self, input_chunk: torch.Tensor,
                             condition_id: int | None = None) -> torch.Tensor:
        """Translate an input chunk: noise it to the smallest student timestep
        and denoise in a single pass conditioned on the cache."""
        if condition_id is not None:
            self.set_condition(condition_id)
        if tuple(input_chunk.shape) != self._frame_shape():
            raise ValueError(f"input chunk shape {tuple(input_chunk.shape)} does not match "
                             f"{self._frame_shape()}")
        t0 = time.perf_counter()
        t1 = self.timesteps[-1]
        cond = self._cond_tensor()
        eps = torch.randn(self._frame_shape(), generator=self.rng)
        with torch.no_grad():
            x = forward_diffuse(input_chunk, t1, eps, self.sched)
            x_hat, _ = self.model.forward_incremental(self.cache, x, t1, cond)
            if not torch.all(torch.isfinite(x_hat)):
                raise RuntimeError(f"non-finite translation at chunk {self.chunk_index}")
            self._commit(x_hat, cond, t0)
        return x_hat.detach().clone()

    def extend_sliding_window(self, context_chunks: int = 1):
        """Rebase: reset the cache and re-commit only the last `context_chunks`
        clean chunks with temporal positions restarted at zero."""
        if context_chunks < 1:
            raise ValueError("context_chunks must be >= 1")
        if len(self._recent_clean) < context_chunks or self.cache.committed_chunks < context_chunks:
            raise ValueError(
                f"need {context_chunks} committed chunks, have {self.cache.committed_chunks}")
        context = list(self._recent_clean)[-context_chunks:]
        self.cache.reset()
        cond = self._cond_tensor()
        with torch.no_grad():
            for chunk in context:
                self.model.commit_chunk(self.cache, chunk, cond,
                                        expect_index=self.cache.committed_chunks)

    def generate_stream(self, n_chunks: int, window_chunks: int | None = None,
                        context_chunks: int = 1) -> list[torch.Tensor]:
        """Drive generation for n_chunks, rebasing whenever the cache reaches
        `window_chunks` committed chunks."""
        chunks = []
        for _ in range(n_chunks):
            if window_chunks and self.cache.committed_chunks >= window_chunks:
                self.extend_sliding_window(context_chunks)
            chunks.append(self.generate_chunk())
        return chunks
