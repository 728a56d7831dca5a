"""End-to-end orchestration shared by the CLI and the acceptance suite:
student sampling and evaluation, degradation measurement, the ablation grid,
and the latency comparison against full bidirectional sampling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset
from .distill import DistillConfig, build_distill_state, distill_loop
from .metrics import MetricReport, curve_slope, degradation_curve, frame_marginal_mmd
from .model import CausalDiT, ChunkLayout
from .ode import OdePairSet, init_student_from_teacher, regress_student
from .schedule import NoiseSchedule, build_schedule
from .streaming import GenerationSession
from .teacher import TrainConfig, sample_videos


def sample_student_videos(student: CausalDiT, layout: ChunkLayout, n: int, cond: int,
                          seed: int = 0, n_chunks: int | None = None,
                          window_chunks: int | None = None) -> np.ndarray:
    """Few-step streaming generation of n independent videos (batched in one
    session); (n, chunks*k, H, W, C) float32."""
    session = GenerationSession(student, layout.chunk_frames, cond, seed=seed, batch=n)
    chunks = session.generate_stream(n_chunks or layout.n_chunks, window_chunks=window_chunks)
    return torch.cat(chunks, dim=1).numpy().astype(np.float32)


def evaluate_student(student: CausalDiT, dataset: Dataset, layout: ChunkLayout,
                     n_samples: int = 24, seed: int = 0,
                     n_classes: int = 4) -> MetricReport:
    """Frame-marginal MMD per condition for 4-step streamed videos."""
    mmd = {}
    for cond in range(n_classes):
        vids = sample_student_videos(student, layout, n_samples, cond, seed=seed + cond)
        frames = vids.reshape(-1, *dataset.frame_shape)
        mmd[cond] = frame_marginal_mmd(frames, dataset.frames_of_condition(cond), seed=seed)
    return MetricReport(mmd_per_condition=mmd, seed=seed)


def student_degradation(student: CausalDiT, dataset: Dataset, layout: ChunkLayout,
                        cond: int, length_factor: int = 4, n_streams: int = 32,
                        seed: int = 0) -> list[float]:
    """Degradation curve over length_factor x the training length using the
    sliding window, against the data's per-chunk-index marginals."""
    n_chunks = length_factor * layout.n_chunks
    vids = sample_student_videos(student, layout, n_streams, cond, seed=seed,
                                 n_chunks=n_chunks, window_chunks=layout.n_chunks)
    k = layout.chunk_frames
    stream = [vids[:, i * k:(i + 1) * k].reshape(-1, *dataset.frame_shape)
              for i in range(n_chunks)]
    reference = [dataset.chunk_frames_of_condition(cond, c, k)
                 for c in range(layout.n_chunks)]
    return degradation_curve(stream, reference, seed=seed)


def degradation_slopes(student: CausalDiT, dataset: Dataset, layout: ChunkLayout,
                       seeds: list[int], cond: int = 1, length_factor: int = 4,
                       n_streams: int = 32) -> list[float]:
    return [curve_slope(student_degradation(student, dataset, layout, cond,
                                            length_factor, n_streams, seed=s))
            for s in seeds]


@dataclass
class AblationCell:
    name: str
    ode_init: bool
    teacher_kind: str  # "bidirectional" | "causal" | "none"
    report: MetricReport = field(default=None)  # type: ignore[assignment]
    student: CausalDiT = field(default=None, repr=False)  # type: ignore[assignment]


ABLATION_CELLS = (
    ("no_ode+bidirectional", False, "bidirectional"),
    ("ode+none", True, "none"),
    ("ode+causal", True, "causal"),
    ("ode+bidirectional", True, "bidirectional"),
)


def run_ablation_cell(name: str, ode_init: bool, teacher_kind: str, teacher: CausalDiT,
                      causal_teacher: CausalDiT | None, dataset: Dataset,
                      pairs: OdePairSet | None, layout: ChunkLayout,
                      distill_config: DistillConfig, regress_config: TrainConfig,
                      eval_samples: int = 24, eval_seed: int = 0) -> AblationCell:
    """One row of the ablation grid: optional ODE-regression init, optional
    DMD distillation against the chosen teacher, then student evaluation."""
    if ode_init:
        if pairs is None:
            raise ValueError("ODE-regression cells need a pair set")
        student = init_student_from_teacher(teacher)
        student, _ = regress_student(student, pairs, regress_config, layout)
    else:
        student = init_student_from_teacher(teacher)
    if teacher_kind != "none":
        if teacher_kind == "causal":
            if causal_teacher is None:
                raise ValueError("causal-teacher cell needs the fine-tuned causal teacher")
            s_data, causal = causal_teacher, True
        else:
            s_data, causal = teacher, False
        state = build_distill_state(s_data, student, layout, distill_config,
                                    teacher_causal=causal)
        student, _ = distill_loop(state, dataset)
    report = evaluate_student(student, dataset, layout, n_samples=eval_samples, seed=eval_seed)
    return AblationCell(name=name, ode_init=ode_init, teacher_kind=teacher_kind,
                        report=report, student=student)


def run_ablation_grid(teacher: CausalDiT, causal_teacher: CausalDiT, dataset: Dataset,
                      pairs: OdePairSet, layout: ChunkLayout, distill_config: DistillConfig,
                      regress_config: TrainConfig, eval_samples: int = 24,
                      eval_seed: int = 0) -> list[AblationCell]:
    return [run_ablation_cell(name, ode, kind, teacher, causal_teacher, dataset, pairs,
                              layout, distill_config, regress_config, eval_samples, eval_seed)
            for name, ode, kind in ABLATION_CELLS]


def latency_comparison(student: CausalDiT, teacher: CausalDiT, layout: ChunkLayout,
                       n_frames: int, sched: NoiseSchedule | None = None,
                       teacher_steps: int = 32, guidance: float = 3.5,
                       seed: int = 0) -> dict:
    """Wall-clock time to first streamed chunk vs the bidirectional teacher's
    full-video DDIM sampling time."""
    sched = sched or build_schedule(student.config.T)
    session = GenerationSession(student, layout.chunk_frames, 0, seed=seed)
    t0 = time.perf_counter()
    session.generate_chunk()
    streaming_first_chunk_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    sample_videos(teacher, sched, 1, 0, n_frames, steps=teacher_steps, guidance=guidance,
                  seed=seed, batch_size=1)
    teacher_full_video_s = time.perf_counter() - t0
    return {
        "streaming_first_chunk_s": streaming_first_chunk_s,
        "teacher_full_video_s": teacher_full_video_s,
    }
