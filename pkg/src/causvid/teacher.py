"""Teacher training: the bidirectional denoiser, the causal many-step baseline
fine-tuned from it, guided DDIM video sampling, and teacher evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .metrics import MetricReport, frame_marginal_mmd
from .model import CausalDiT, ChunkLayout, ModelConfig, build_mask, save_weights
from .schedule import (
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    denoising_loss,
    forward_diffuse,
    make_sampling_grid,
)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    cond_dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations, batch_size and lr must be positive")
        if not 0 <= self.cond_dropout < 1:
            raise ValueError("cond_dropout must be in [0, 1)")


def _dropout_conditions(cond: torch.Tensor, p: float, null_id: int,
                        generator: torch.Generator) -> torch.Tensor:
    if p == 0:
        return cond
    drop = torch.rand(cond.shape, generator=generator) < p
    return torch.where(drop, torch.full_like(cond, null_id), cond)


def _guard_finite(loss: torch.Tensor, iteration: int, what: str):
    if not torch.isfinite(loss):
        raise RuntimeError(f"{what} diverged at iteration {iteration}: loss={loss.item()}")


def _maybe_checkpoint(model: CausalDiT, config: TrainConfig, iteration: int,
                      checkpoint_dir: str | Path | None, tag: str):
    if checkpoint_dir and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
        path = Path(checkpoint_dir) / f"{tag}_{iteration + 1:06d}.cvwt"
        save_weights(model, path)


def train_bidirectional(dataset: Dataset, config: TrainConfig,
                        model_config: ModelConfig | None = None,
                        sched: NoiseSchedule | None = None,
                        checkpoint_dir: str | Path | None = None,
                        ) -> tuple[CausalDiT, list[tuple[int, float]]]:
    """Standard denoising training with full bidirectional attention.

    One shared timestep per video drawn uniformly from [1, T]; the condition id
    drops to the null id with probability `cond_dropout` so guidance has an
    unconditional branch. Deterministic given the config seed.
    """
    from .schedule import build_schedule

    model_config = model_config or ModelConfig()
    sched = sched or build_schedule(model_config.T)
    torch.manual_seed(config.seed)
    model = CausalDiT(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                            weight_decay=config.weight_decay)
    g = torch.Generator().manual_seed(config.seed)
    n_frames = dataset.n_frames
    history = []
    for it in range(config.iterations):
        x0, cond = dataset.sample_batch(config.batch_size, g)
        cond = _dropout_conditions(cond, config.cond_dropout, model_config.null_cond, g)
        t = torch.randint(1, model_config.T + 1, (config.batch_size,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        x_t = forward_diffuse(x0, t, eps, sched)
        pred = model(x_t, t[:, None].expand(-1, n_frames), cond, mask=None)
        loss = denoising_loss(pred, eps)
        _guard_finite(loss, it, "bidirectional teacher training")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((it, loss.item()))
        _maybe_checkpoint(model, config, it, checkpoint_dir, "teacher")
    return model, history


def finetune_causal_teacher(weights: CausalDiT, dataset: Dataset, config: TrainConfig,
                            layout: ChunkLayout,
                            sched: NoiseSchedule | None = None,
                            checkpoint_dir: str | Path | None = None,
                            ) -> tuple[CausalDiT, list[tuple[int, float]]]:
    """Fine-tune a bidirectional teacher into the many-step causal baseline.

    Applies the block-causal mask and draws an independent timestep in [0, T]
    for every chunk, with the denoising loss over all chunks."""
    from .schedule import build_schedule

    model_config = weights.config
    sched = sched or build_schedule(model_config.T)
    model = CausalDiT(model_config)
    model.load_state_dict(weights.state_dict())
    mask = build_mask(layout)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                            weight_decay=config.weight_decay)
    g = torch.Generator().manual_seed(config.seed)
    history = []
    for it in range(config.iterations):
        x0, cond = dataset.sample_batch(config.batch_size, g)
        cond = _dropout_conditions(cond, config.cond_dropout, model_config.null_cond, g)
        t_chunks = torch.randint(0, model_config.T + 1,
                                 (config.batch_size, layout.n_chunks), generator=g)
        t_frames = layout.frame_timesteps(t_chunks)
        eps = torch.randn(x0.shape, generator=g)
        x_t = forward_diffuse(x0, t_frames, eps, sched)
        pred = model(x_t, t_frames, cond, mask=mask)
        loss = denoising_loss(pred, eps)
        _guard_finite(loss, it, "causal teacher fine-tuning")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((it, loss.item()))
        _maybe_checkpoint(model, config, it, checkpoint_dir, "causal_teacher")
    return model, history


def validation_loss(model: CausalDiT, dataset: Dataset, seed: int = 0, n_batches: int = 16,
                    batch_size: int = 8, mask=None, sched: NoiseSchedule | None = None) -> float:
    """Denoising loss under a fixed evaluation protocol: one shared timestep per
    video from [1, T], no condition dropout, seeded noise."""
    from .schedule import build_schedule

    sched = sched or build_schedule(model.config.T)
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    n_frames = dataset.n_frames
    with torch.no_grad():
        for _ in range(n_batches):
            x0, cond = dataset.sample_batch(batch_size, g)
            t = torch.randint(1, model.config.T + 1, (batch_size,), generator=g)
            eps = torch.randn(x0.shape, generator=g)
            x_t = forward_diffuse(x0, t, eps, sched)
            pred = model(x_t, t[:, None].expand(-1, n_frames), cond, mask=mask)
            total += denoising_loss(pred, eps).item()
    return total / n_batches


def _guided_eps(model: CausalDiT, x: torch.Tensor, t_frames: torch.Tensor, cond: torch.Tensor,
                guidance: float, mask) -> torch.Tensor:
    eps_c = model(x, t_frames, cond, mask=mask)
    if guidance == 1.0:
        return eps_c
    null = torch.full_like(cond, model.config.null_cond)
    eps_u = model(x, t_frames, null, mask=mask)
    return cfg_combine(eps_c, eps_u, guidance)


def sample_videos(model: CausalDiT, sched: NoiseSchedule, n: int, cond: int,
                  n_frames: int, steps: int = 32, guidance: float = 3.5, seed: int = 0,
                  batch_size: int = 16, t_start: int = 999,
                  clip_x0: float | None = 1.0) -> np.ndarray:
    """Guided bidirectional DDIM sampling of full videos; (n, N, H, W, C) float32."""
    cfg = model.config
    grid = make_sampling_grid(steps, t_start)
    g = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            b = min(batch_size, n - lo)
            x = torch.randn(b, n_frames, cfg.frame_h, cfg.frame_w, cfg.channels, generator=g)
            conds = torch.full((b,), cond, dtype=torch.long)
            for t, t_prev in zip(grid, grid[1:]):
                t_frames = torch.full((b, n_frames), t)
                eps_hat = _guided_eps(model, x, t_frames, conds, guidance, mask=None)
                x = ddim_step(x, eps_hat, t, t_prev, sched, clip_x0=clip_x0)
            out.append(x.numpy())
    return np.concatenate(out, axis=0).astype(np.float32)


def sample_videos_causal(model: CausalDiT, sched: NoiseSchedule, n: int, cond: int,
                         layout: ChunkLayout, steps: int = 32, guidance: float = 3.5,
                         seed: int = 0, batch_size: int = 16, t_start: int = 999,
                         clip_x0: float | None = 1.0) -> np.ndarray:
    """Autoregressive many-step sampling for the causal baseline: each chunk is
    denoised with full DDIM conditioned on previously committed clean chunks."""
    cfg = model.config
    grid = make_sampling_grid(steps, t_start)
    g = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            b = min(batch_size, n - lo)
            conds = torch.full((b,), cond, dtype=torch.long)
            null = torch.full((b,), cfg.null_cond, dtype=torch.long)
            cache = model.make_cache(layout.chunk_frames)
            chunks = []
            for _ in range(layout.n_chunks):
                x = torch.randn(b, layout.chunk_frames, cfg.frame_h, cfg.frame_w, cfg.channels,
                                generator=g)
                for t, t_prev in zip(grid, grid[1:]):
                    eps_c, _ = model.forward_incremental(cache, x, t, conds)
                    if guidance == 1.0:
                        eps_hat = eps_c
                    else:
                        eps_u, _ = model.forward_incremental(cache, x, t, null)
                        eps_hat = cfg_combine(eps_c, eps_u, guidance)
                    x = ddim_step(x, eps_hat, t, t_prev, sched, clip_x0=clip_x0)
                model.commit_chunk(cache, x, conds)
                chunks.append(x)
            out.append(torch.cat(chunks, dim=1).numpy())
    return np.concatenate(out, axis=0).astype(np.float32)


def evaluate_teacher(model: CausalDiT, dataset: Dataset, sched: NoiseSchedule,
                     layout: ChunkLayout, n_samples: int = 24, steps: int = 32,
                     guidance: float = 3.5, seed: int = 0, causal: bool = False,
                     n_classes: int | None = None) -> MetricReport:
    """Sample per condition with DDIM and report frame-marginal MMD plus loss."""
    n_classes = n_classes or model.config.cond_vocab - 1
    mmd = {}
    for cond in range(n_classes):
        if causal:
            vids = sample_videos_causal(model, sched, n_samples, cond, layout, steps,
                                        guidance, seed + cond)
        else:
            vids = sample_videos(model, sched, n_samples, cond, dataset.n_frames, steps,
                                 guidance, seed + cond)
        frames = vids.reshape(-1, *dataset.frame_shape)
        mmd[cond] = frame_marginal_mmd(frames, dataset.frames_of_condition(cond), seed=seed)
    mask = build_mask(layout) if causal else None
    val = validation_loss(model, dataset, seed=seed, mask=mask, sched=sched)
    return MetricReport(mmd_per_condition=mmd, seed=seed, extras={"validation_loss": val})


def save_loss_history(history: list[tuple[int, float]], path) -> None:
    """Loss history as comma-separated (iteration, loss) text."""
    with open(path, "w") as f:
        f.write("iteration,loss\n")
        for it, loss in history:
            f.write(f"{it},{loss!r}\n")


def load_loss_history(path) -> list[tuple[int, float]]:
    out = []
    with open(path) as f:
        next(f)
        for line in f:
            it, loss = line.strip().split(",")
            out.append((int(it), float(loss)))
    return out
