"""Asymmetric distribution-matching distillation: a frozen bidirectional real
score supervises a few-step block-causal clean-frame generator, with an online
fake score trained on the generator's outputs under a two-time-scale rule.

The generator update uses a stop-gradient surrogate whose gradient with
respect to the generator output equals the normalized score difference exactly:
(sigma_t^2/alpha_t) * (s_gen - s_data) per element, divided per sample by the
mean |x_hat0 - teacher denoised estimate| plus 1e-8 (see dmd_score_difference).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import Dataset
from .model import CausalDiT, ChunkLayout, build_mask, save_weights, weights_checksum
from .ode import STUDENT_TIMESTEP_SET, init_student_from_teacher
from .schedule import (
    NoiseSchedule,
    build_schedule,
    cfg_combine,
    denoising_loss,
    forward_diffuse,
)

NORMALIZER_EPS = 1e-8


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 6000
    batch_size: int = 4
    gen_lr: float = 2e-4
    fake_lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    guidance: float = 3.5
    ttur_ratio: int = 5
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.ttur_ratio < 1:
            raise ValueError("ttur_ratio must be >= 1")


@dataclass
class DmdLossReport:
    iteration: int
    dmd_loss: float
    fake_loss: float
    gen_grad_norm: float
    fake_grad_norm: float
    t: int
    t_chunks: list[int] = field(default_factory=list)

    def __post_init__(self):
        vals = [self.dmd_loss, self.fake_loss, self.gen_grad_norm, self.fake_grad_norm]
        if not all(torch.isfinite(torch.tensor(v)) for v in vals):
            raise RuntimeError(f"non-finite distillation report at iteration {self.iteration}: {vals}")


class DistillState:
    """Owns the generator, the frozen real score, the online fake score, their
    optimizers and the sampling state for one distillation run."""

    def __init__(self, student: CausalDiT, s_data: CausalDiT, layout: ChunkLayout,
                 config: DistillConfig, sched: NoiseSchedule | None = None,
                 teacher_causal: bool = False, s_gen: CausalDiT | None = None):
        if student.config.predicts != "x0":
            raise ValueError("the student must predict clean frames")
        if s_data.config.predicts != "eps":
            raise ValueError("score networks must predict noise")
        self.generator = student
        self.s_data = s_data
        self.s_data.requires_grad_(False)
        self.s_data.eval()
        if s_gen is None:
            s_gen = CausalDiT(s_data.config)
            s_gen.load_state_dict(s_data.state_dict())
        self.s_gen = s_gen
        self.layout = layout
        self.config = config
        self.sched = sched or build_schedule(student.config.T)
        self.teacher_causal = teacher_causal
        self.student_mask = build_mask(layout)
        self.teacher_mask = build_mask(layout) if teacher_causal else None
        self.t_set = torch.tensor(STUDENT_TIMESTEP_SET)
        self.guidance = config.guidance
        self.ttur_ratio = config.ttur_ratio
        self.opt_gen = torch.optim.AdamW(student.parameters(), lr=config.gen_lr,
                                         betas=config.betas, weight_decay=config.weight_decay)
        self.opt_fake = torch.optim.AdamW(s_gen.parameters(), lr=config.fake_lr,
                                          betas=config.betas, weight_decay=config.weight_decay)
        self.iteration = 0
        self.generator_updates = 0
        self.fake_updates = 0
        self.rng = torch.Generator().manual_seed(config.seed)
        self.s_data_checksum = weights_checksum(s_data)

    def data_eps(self, x_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        """Guided noise prediction of the frozen real score."""
        b, n = x_t.shape[:2]
        t_frames = torch.full((b, n), t)
        eps_c = self.s_data(x_t, t_frames, cond, mask=self.teacher_mask)
        if self.guidance == 1.0:
            return eps_c
        null = torch.full_like(cond, self.s_data.config.null_cond)
        eps_u = self.s_data(x_t, t_frames, null, mask=self.teacher_mask)
        return cfg_combine(eps_c, eps_u, self.guidance)

    def gen_eps(self, x_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        """Conditional noise prediction of the fake score (never guided)."""
        b, n = x_t.shape[:2]
        return self.s_gen(x_t, torch.full((b, n), t), cond, mask=None)

    def assert_asymmetry(self):
        """Structural invariant: the student is block-causal; the default real
        score runs fully bidirectional (the causal teacher only in ablation)."""
        assert self.student_mask is not None
        assert (self.teacher_mask is not None) == self.teacher_causal


def dmd_score_difference(x_t: torch.Tensor, t: int, sched: NoiseSchedule,
                         data_eps_fn, gen_eps_fn,
                         x_hat0: torch.Tensor | None = None) -> torch.Tensor:
    """The generator's normalized descent direction from the two scores at x_t.

    The score difference is carried in denoised-estimate space, i.e.
    (sigma_t^2 / alpha_t) * (s_gen - s_data), and divided per sample by the
    mean |x_hat0 - denoised_data_estimate| (plus 1e-8). That normalizer stays
    at the scale of the teacher's denoising residual rather than of the
    difference itself, so updates vanish as the two scores converge instead of
    staying unit-size forever (unit-size normalization has no fixed point and
    measurably degrades a well-initialized student).
    """
    if t < 1:
        raise ValueError("score difference undefined at t=0")
    a, s = sched.coeffs(t, x_t.dtype)
    pred_data = (x_t - s * data_eps_fn(x_t, t)) / a
    pred_gen = (x_t - s * gen_eps_fn(x_t, t)) / a
    diff = pred_gen - pred_data
    anchor = x_hat0 if x_hat0 is not None else pred_gen
    dims = tuple(range(1, diff.dim()))
    norm = (anchor.detach() - pred_data).abs().mean(dim=dims, keepdim=True) + NORMALIZER_EPS
    return diff / norm


def dmd_surrogate_loss(x_hat0: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """0.5 * sum((x_hat0 - stopgrad(x_hat0 - grad))^2); its gradient with
    respect to x_hat0 equals `grad` exactly."""
    target = (x_hat0 - grad).detach()
    return 0.5 * torch.sum((x_hat0 - target) ** 2)


def student_predict(state: DistillState, x0: torch.Tensor, cond: torch.Tensor,
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Noise each chunk at its own timestep drawn from the student set and
    predict clean frames with the block-causal generator."""
    b = x0.shape[0]
    choice = torch.randint(0, len(state.t_set), (b, state.layout.n_chunks), generator=state.rng)
    t_chunks = state.t_set[choice]
    t_frames = state.layout.frame_timesteps(t_chunks)
    eps = torch.randn(x0.shape, generator=state.rng)
    x_in = forward_diffuse(x0, t_frames, eps, state.sched)
    x_hat0 = state.generator(x_in, t_frames, cond, mask=state.student_mask)
    return x_hat0, t_chunks, eps


def dmd_generator_gradient(state: DistillState, x_hat0: torch.Tensor, cond: torch.Tensor,
                           t: int, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Surrogate loss and its (stop-gradient) descent direction at x_hat0.

    Noises the prediction to the sampled timestep, evaluates both scores there
    without gradients, and builds the surrogate whose backward pass sends the
    normalized score difference through x_hat0 only.
    """
    if not torch.all(torch.isfinite(x_hat0)):
        raise RuntimeError("generator produced non-finite frames")
    x_t = forward_diffuse(x_hat0, t, eps, state.sched)
    with torch.no_grad():
        grad = dmd_score_difference(
            x_t, t, state.sched,
            lambda x, tt: state.data_eps(x, tt, cond),
            lambda x, tt: state.gen_eps(x, tt, cond),
            x_hat0=x_hat0,
        )
    if not torch.all(torch.isfinite(grad)):
        raise RuntimeError("non-finite score difference in DMD update")
    return dmd_surrogate_loss(x_hat0, grad), grad


def update_fake_score(state: DistillState, x_hat0: torch.Tensor, cond: torch.Tensor) -> float:
    """One denoising update of s_gen on detached generator outputs: fresh noise,
    fresh t ~ Uniform[1, T]; s_data is untouched."""
    x_hat0 = x_hat0.detach()
    t = int(torch.randint(1, state.sched.T + 1, (1,), generator=state.rng))
    eps = torch.randn(x_hat0.shape, generator=state.rng)
    x_t = forward_diffuse(x_hat0, t, eps, state.sched)
    pred = state.gen_eps(x_t, t, cond)
    loss = denoising_loss(pred, eps)
    state.opt_fake.zero_grad()
    loss.backward()
    state.opt_fake.step()
    state.fake_updates += 1
    return loss.item()


def _sample_dmd_timestep(state: DistillState) -> int:
    """Uniform over [0, T] with t=0 rejected and resampled (score undefined)."""
    while True:
        t = int(torch.randint(0, state.sched.T + 1, (1,), generator=state.rng))
        if t != 0:
            return t


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total**0.5


def distill_step(state: DistillState, x0: torch.Tensor, cond: torch.Tensor) -> DmdLossReport:
    """One outer iteration: a generator update followed by ttur_ratio fake-score
    updates, per the two-time-scale rule."""
    state.assert_asymmetry()
    x_hat0, t_chunks, _ = student_predict(state, x0, cond)
    t = _sample_dmd_timestep(state)
    eps = torch.randn(x_hat0.shape, generator=state.rng)
    loss, _ = dmd_generator_gradient(state, x_hat0, cond, t, eps)
    state.opt_gen.zero_grad()
    loss.backward()
    gen_norm = _grad_norm(state.generator.parameters())
    state.opt_gen.step()
    state.generator_updates += 1

    fake_losses = []
    detached = x_hat0.detach()
    for _ in range(state.ttur_ratio):
        fake_losses.append(update_fake_score(state, detached, cond))
    fake_norm = _grad_norm(state.s_gen.parameters())
    report = DmdLossReport(
        iteration=state.iteration,
        dmd_loss=loss.item(),
        fake_loss=sum(fake_losses) / len(fake_losses),
        gen_grad_norm=gen_norm,
        fake_grad_norm=fake_norm,
        t=t,
        t_chunks=t_chunks[0].tolist(),
    )
    state.iteration += 1
    return report


def distill_loop(state: DistillState, dataset: Dataset, iterations: int | None = None,
                 checkpoint_dir: str | Path | None = None,
                 ) -> tuple[CausalDiT, list[DmdLossReport]]:
    """Run the full distillation schedule; deterministic given the state seed."""
    iterations = iterations if iterations is not None else state.config.iterations
    reports = []
    for it in range(iterations):
        x0, cond = dataset.sample_batch(state.config.batch_size, state.rng)
        reports.append(distill_step(state, x0, cond))
        if (checkpoint_dir and state.config.checkpoint_every
                and (it + 1) % state.config.checkpoint_every == 0):
            save_weights(state.generator, Path(checkpoint_dir) / f"student_{it + 1:06d}.cvwt")
    if weights_checksum(state.s_data) != state.s_data_checksum:
        raise RuntimeError("frozen real score changed during distillation")
    return state.generator, reports


def build_distill_state(teacher: CausalDiT, student: CausalDiT | None, layout: ChunkLayout,
                        config: DistillConfig, teacher_causal: bool = False) -> DistillState:
    """Assemble a distillation run; the student defaults to a teacher clone
    (the no-ODE-init ablation)."""
    if student is None:
        student = init_student_from_teacher(teacher)
    return DistillState(student, teacher, layout, config, teacher_causal=teacher_causal)


def save_distill_history(reports: list[DmdLossReport], path) -> None:
    with open(path, "w") as f:
        f.write("iteration,dmd_loss,fake_loss,gen_grad_norm,fake_grad_norm,t\n")
        for r in reports:
            f.write(f"{r.iteration},{r.dmd_loss!r},{r.fake_loss!r},"
                    f"{r.gen_grad_norm!r},{r.fake_grad_norm!r},{r.t}\n")
