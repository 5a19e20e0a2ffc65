"""Gaussian diffusion over log-transformed OD matrices: schedule, forward process,
training objective and accelerated sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Union

import numpy as np
import torch

from .denoiser import Condition
from .graph import InvalidInputError, ODMatrix


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# a denoiser maps (noisy log-flows, step, condition) -> predicted noise
DenoiserFn = Callable[[torch.Tensor, int, Condition], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[t-1]`` is beta_t for t = 1..T; ``alpha_bar_at(0) == 1``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    s: float = 0.008

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")

    def f(t):
        return np.cos(((t / T + s) / (1 + s)) * np.pi / 2) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    ab = f(steps) / f(0.0)
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alpha = 1.0 - beta
    # recompute the product so clipping stays consistent with alpha_bar = prod(alpha)
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, s)


def log_transform(F):
    """log(F + 1), elementwise; works on numpy arrays and tensors."""
    if isinstance(F, torch.Tensor):
        return torch.log1p(F)
    return np.log1p(np.asarray(F, dtype=np.float64))


def inverse_log(F_log):
    if isinstance(F_log, torch.Tensor):
        return torch.expm1(F_log)
    return np.expm1(np.asarray(F_log, dtype=np.float64))


def diffuse(f0_log, t: int, epsilon, schedule: NoiseSchedule):
    """Closed-form forward marginal sqrt(ab_t) F0 + sqrt(1 - ab_t) eps."""
    if not 0 <= t <= schedule.T:
        raise InvalidInputError(f"t={t} outside [0, {schedule.T}]")
    if tuple(np.shape(epsilon)) != tuple(np.shape(f0_log)):
        raise InvalidInputError("epsilon must match the shape of F0")
    ab = schedule.alpha_bar_at(t)
    return math.sqrt(ab) * f0_log + math.sqrt(1.0 - ab) * epsilon


# --------------------------------------------------------------------------
# training


def diffusion_loss(
    model: DenoiserFn,
    cond: Condition,
    f0_log: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
):
    """One Monte-Carlo draw of the noise-prediction MSE. Returns (loss, t)."""
    t = int(torch.randint(1, schedule.T + 1, (1,), generator=generator))
    eps = torch.randn(f0_log.shape, generator=generator, dtype=f0_log.dtype)
    f_t = diffuse(f0_log, t, eps, schedule)
    pred = model(f_t, t, cond)
    return torch.mean((eps - pred) ** 2), t


def training_step(
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer],
    batch: list[tuple[Condition, torch.Tensor]],
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> float:
    """Accumulate gradients over ``batch`` (one area per micro-step), then update once.

    ``batch`` holds (condition, log-transformed flows) pairs. With
    ``optimizer=None`` only the loss is evaluated.
    """
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for cond, f0_log in batch:
        loss, t = diffusion_loss(model, cond, f0_log, schedule, generator)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at t={t}, area={cond.area_id!r}")
        if optimizer is not None:
            (loss / len(batch)).backward()
        total += float(loss.detach())
    if optimizer is not None:
        optimizer.step()
    return total / len(batch)


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    """``update="ddim"`` is the deterministic DDIM jump to ``t - delta``;
    ``update="paper"`` applies the one-step posterior-mean rule at every
    visited step, which diverges once steps are skipped. ``clip_x0`` clamps
    the predicted clean log-flows during DDIM updates. ``average`` picks the
    space in which samples are averaged."""

    tau: int = 1000
    n_samples: int = 10
    round_counts: bool = False
    update: Literal["paper", "ddim"] = "ddim"
    average: Literal["log", "linear"] = "log"
    clip_x0: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.tau < 1 or self.n_samples < 1:
            raise ConfigError("tau and n_samples must be >= 1")
        if self.update not in ("paper", "ddim"):
            raise ConfigError(f"unknown update rule {self.update!r}")
        if self.average not in ("log", "linear"):
            raise ConfigError(f"unknown averaging space {self.average!r}")

    def step_size(self, T: int) -> int:
        if self.tau > T or T % self.tau:
            raise ConfigError(f"tau={self.tau} must divide T={T}")
        return T // self.tau


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def ddim_sample(
    model: DenoiserFn,
    cond: Condition,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    seed: Union[int, torch.Generator] = 0,
    f_T: Optional[torch.Tensor] = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Reverse process from F^T ~ N(0, I) down to F^0 (log space).

    Visits t = T, T - dt, ..., dt with dt = T / tau.
    """
    dt = sampler.step_size(schedule.T)
    n = cond.node_features.shape[0]
    gen = seed if isinstance(seed, torch.Generator) else _generator(seed)
    x = torch.randn((n, n), generator=gen, dtype=dtype) if f_T is None else f_T.clone()
    with torch.no_grad():
        for t in range(schedule.T, 0, -dt):
            eps = model(x, t, cond)
            a_t = schedule.alpha_at(t)
            ab_t = schedule.alpha_bar_at(t)
            if sampler.update == "paper":
                x = (x - ((1.0 - a_t) / math.sqrt(1.0 - ab_t)) * eps) / math.sqrt(a_t)
            else:
                ab_prev = schedule.alpha_bar_at(t - dt)
                x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
                if sampler.clip_x0 is not None:
                    x0 = x0.clamp(*sampler.clip_x0)
                    eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
                x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return x


def sample_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(int(seed)).spawn(n)]


def postprocess(samples_log: list[torch.Tensor], sampler: SamplerConfig) -> np.ndarray:
    logs = np.stack([s.detach().cpu().double().numpy() for s in samples_log])
    if sampler.average == "log":
        F = inverse_log(logs.mean(axis=0))
    else:
        F = inverse_log(logs).mean(axis=0)
    F = np.maximum(F, 0.0)
    if sampler.round_counts:
        F = np.round(F)
    return F


def generate_od(
    model: DenoiserFn,
    cond: Condition,
    schedule: NoiseSchedule,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    dtype=torch.float32,
) -> ODMatrix:
    """Average ``n_samples`` reverse-process draws (distinct sub-seeds) into one OD matrix."""
    samples = [
        ddim_sample(model, cond, schedule, sampler, s, dtype=dtype) for s in sample_seeds(seed, sampler.n_samples)
    ]
    return ODMatrix(postprocess(samples, sampler))
