"""Student initialization from teacher ODE trajectories: generate solution
pairs with guided DDIM, store them in the CVOP container, and pretrain the
block-causal student by regression onto trajectory endpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import CausalDiT, ChunkLayout, ModelConfig, build_mask
from .schedule import INFERENCE_TIMESTEPS, NoiseSchedule, ddim_step, make_sampling_grid
from .teacher import TrainConfig, _guard_finite, _guided_eps, _maybe_checkpoint

PAIR_MAGIC = b"CVOP"
PAIR_VERSION = 1


class OdePairSet:
    """Teacher trajectory snapshots at the student's inference timesteps plus
    the trajectory endpoint, with per-pair condition ids."""

    def __init__(self, timesteps: tuple[int, ...], states: np.ndarray,
                 endpoints: np.ndarray, conds: np.ndarray):
        if states.shape[1] != len(timesteps):
            raise ValueError("one stored state per timestep required")
        if states.shape[0] != endpoints.shape[0] or states.shape[0] != conds.shape[0]:
            raise ValueError("pair counts disagree")
        if states.shape[2:] != endpoints.shape[1:]:
            raise ValueError("states and endpoints must share the video shape")
        self.timesteps = tuple(int(t) for t in timesteps)
        self.states = np.ascontiguousarray(states, dtype=np.float32)      # (n, Q, N, H, W, C)
        self.endpoints = np.ascontiguousarray(endpoints, dtype=np.float32)  # (n, N, H, W, C)
        self.conds = np.ascontiguousarray(conds, dtype=np.uint32)

    def __len__(self) -> int:
        return self.states.shape[0]

    def state_at(self, pair: np.ndarray, t: int) -> np.ndarray:
        """State of given pair indices at student timestep t (0 = endpoint)."""
        if t == 0:
            return self.endpoints[pair]
        return self.states[pair, self.timesteps.index(t)]


def generate_ode_pairs(teacher: CausalDiT, sched: NoiseSchedule, layout: ChunkLayout,
                       n: int = 1000, solver_steps: int = 50, guidance: float = 3.5,
                       seed: int = 0, batch_size: int = 16,
                       n_classes: int | None = None,
                       clip_x0: float | None = 1.0) -> OdePairSet:
    """Run guided DDIM from Gaussian noise to t=0, recording the states at the
    student's inference timesteps.

    The solver grid starts at 999 — the initial draw is the stored t=999 state —
    and is adjusted to contain every student timestep. Conditions cycle so the
    pair set is class-balanced. Pairs whose trajectory goes non-finite are
    dropped with a diagnostic.
    """
    if solver_steps < 4:
        raise ValueError("solver_steps must be >= 4 to cover the student timesteps")
    cfg = teacher.config
    n_classes = n_classes or cfg.cond_vocab - 1
    grid = make_sampling_grid(solver_steps, t_start=max(INFERENCE_TIMESTEPS),
                              include=INFERENCE_TIMESTEPS)
    n_frames = layout.n_frames
    states, endpoints, conds = [], [], []
    dropped = 0
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            b = min(batch_size, n - lo)
            cond = torch.tensor([(lo + i) % n_classes for i in range(b)], dtype=torch.long)
            x = torch.randn(b, n_frames, cfg.frame_h, cfg.frame_w, cfg.channels, generator=g)
            snaps = {}
            for t, t_prev in zip(grid, grid[1:]):
                if t in INFERENCE_TIMESTEPS:
                    snaps[t] = x.clone()
                eps_hat = _guided_eps(teacher, x, torch.full((b, n_frames), t), cond,
                                      guidance, mask=None)
                x = ddim_step(x, eps_hat, t, t_prev, sched, clip_x0=clip_x0)
            stacked = torch.stack([snaps[t] for t in INFERENCE_TIMESTEPS], dim=1)
            finite = torch.isfinite(stacked).all(dim=tuple(range(1, stacked.dim()))) \
                & torch.isfinite(x).all(dim=tuple(range(1, x.dim())))
            if not finite.all():
                dropped += int((~finite).sum())
                print(f"[ode] dropped {int((~finite).sum())} non-finite pair(s) "
                      f"in batch starting at {lo}")
            states.append(stacked[finite].numpy())
            endpoints.append(x[finite].numpy())
            conds.append(cond[finite].numpy())
    if dropped == n:
        raise RuntimeError("every ODE trajectory went non-finite; teacher unusable")
    return OdePairSet(INFERENCE_TIMESTEPS, np.concatenate(states), np.concatenate(endpoints),
                      np.concatenate(conds).astype(np.uint32))


def save_pairs(pairs: OdePairSet, path) -> None:
    n, q, nf, h, w, c = pairs.states.shape
    with open(path, "wb") as f:
        f.write(PAIR_MAGIC)
        f.write(struct.pack("<7I", PAIR_VERSION, n, q, nf, h, w, c))
        f.write(struct.pack(f"<{q}I", *pairs.timesteps))
        for i in range(n):
            f.write(struct.pack("<I", int(pairs.conds[i])))
            f.write(pairs.states[i].astype("<f4").tobytes())
            f.write(pairs.endpoints[i].astype("<f4").tobytes())


def load_pairs(path) -> OdePairSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != PAIR_MAGIC:
        raise ValueError(f"bad pair container: {path} lacks CVOP magic")
    version, n, q, nf, h, w, c = struct.unpack_from("<7I", data, 4)
    if version != PAIR_VERSION:
        raise ValueError(f"bad pair container: unsupported version {version}")
    off = 32
    timesteps = struct.unpack_from(f"<{q}I", data, off)
    off += 4 * q
    state_count = q * nf * h * w * c
    end_count = nf * h * w * c
    expected = off + n * (4 + 4 * (state_count + end_count))
    if len(data) != expected:
        raise ValueError(f"bad pair container: expected {expected} bytes, found {len(data)}")
    states = np.empty((n, q, nf, h, w, c), dtype=np.float32)
    endpoints = np.empty((n, nf, h, w, c), dtype=np.float32)
    conds = np.empty(n, dtype=np.uint32)
    for i in range(n):
        (conds[i],) = struct.unpack_from("<I", data, off)
        off += 4
        states[i] = np.frombuffer(data, "<f4", state_count, off).reshape(q, nf, h, w, c)
        off += 4 * state_count
        endpoints[i] = np.frombuffer(data, "<f4", end_count, off).reshape(nf, h, w, c)
        off += 4 * end_count
    return OdePairSet(timesteps, states, endpoints, conds)


def init_student_from_teacher(teacher: CausalDiT) -> CausalDiT:
    """Clone the teacher's weights into a clean-frame-predicting student."""
    import dataclasses

    student = CausalDiT(dataclasses.replace(teacher.config, predicts="x0"))
    student.load_state_dict(teacher.state_dict())
    return student


STUDENT_TIMESTEP_SET = (0,) + tuple(sorted(INFERENCE_TIMESTEPS))


def _regression_batch(pairs: OdePairSet, layout: ChunkLayout, batch_size: int,
                      generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Assemble inputs with independent per-chunk timesteps from the student set.

    A chunk drawn at t=0 receives the clean endpoint as input, so its target —
    the endpoint itself — teaches context pass-through."""
    t_set = torch.tensor(STUDENT_TIMESTEP_SET)
    idx = torch.randint(0, len(pairs), (batch_size,), generator=generator).numpy()
    t_choice = torch.randint(0, len(t_set), (batch_size, layout.n_chunks), generator=generator)
    t_chunks = t_set[t_choice]
    target = torch.from_numpy(pairs.endpoints[idx])
    x = target.clone()
    for b in range(batch_size):
        for ci in range(layout.n_chunks):
            t = int(t_chunks[b, ci])
            if t != 0:
                lo, hi = ci * layout.chunk_frames, min((ci + 1) * layout.chunk_frames, layout.n_frames)
                x[b, lo:hi] = torch.from_numpy(pairs.state_at(np.array([idx[b]]), t)[0, lo:hi])
    cond = torch.from_numpy(pairs.conds[idx].astype(np.int64))
    return x, t_chunks, cond, target


def regress_student(student: CausalDiT, pairs: OdePairSet, config: TrainConfig,
                    layout: ChunkLayout,
                    checkpoint_dir: str | Path | None = None,
                    ) -> tuple[CausalDiT, list[tuple[int, float]]]:
    """Minimize || G(x at per-chunk t, t) - endpoint ||^2 under the causal mask."""
    mask = build_mask(layout)
    opt = torch.optim.AdamW(student.parameters(), lr=config.lr, betas=config.betas,
                            weight_decay=config.weight_decay)
    g = torch.Generator().manual_seed(config.seed)
    history = []
    for it in range(config.iterations):
        x, t_chunks, cond, target = _regression_batch(pairs, layout, config.batch_size, g)
        pred = student(x, layout.frame_timesteps(t_chunks), cond, mask=mask)
        loss = torch.mean((pred - target) ** 2)
        _guard_finite(loss, it, "student ODE regression")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((it, loss.item()))
        _maybe_checkpoint(student, config, it, checkpoint_dir, "student_init")
    return student, history


def regression_loss(student: CausalDiT, pairs: OdePairSet, layout: ChunkLayout,
                    seed: int = 0, n_batches: int = 8, batch_size: int = 8) -> float:
    """Held-out regression loss under the same per-chunk timestep protocol."""
    mask = build_mask(layout)
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_batches):
            x, t_chunks, cond, target = _regression_batch(pairs, layout, batch_size, g)
            pred = student(x, layout.frame_timesteps(t_chunks), cond, mask=mask)
            total += torch.mean((pred - target) ** 2).item()
    return total / n_batches
