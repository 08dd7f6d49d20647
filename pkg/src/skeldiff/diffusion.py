"""Noise schedules and the DDPM forward/reverse arithmetic.

Conventions: diffusion steps are 1-indexed, t in 1..T.  `betas[t-1]` is the
step-t noise variance and `alpha_bars[t]` the cumulative signal retention,
with alpha_bars[0] = 1.  The one-step kernel is
    q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)
and composing it gives the direct kernel
    x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SIGMA_KINDS = ("beta", "beta_tilde")


@dataclass
class NoiseSchedule:
    kind: str
    betas: np.ndarray       # (T,), betas[t-1] = beta_t
    alpha_bars: np.ndarray  # (T+1,), alpha_bars[0] = 1
    spec: dict = None  # constructor arguments, for artifact provenance

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        t = self.betas.shape[0]
        if self.alpha_bars.shape != (t + 1,):
            raise ValueError(f"alpha_bars must have length T+1={t + 1}, got {self.alpha_bars.shape}")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly in (0, 1)")
        if self.alpha_bars[0] != 1.0:
            raise ValueError("alpha_bars[0] must be exactly 1")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return self.betas.shape[0]

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"t={t} outside 0..{self.num_steps}")
        return float(self.alpha_bars[t])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"diffusion step t={t} outside 1..{self.num_steps}")

    def sigma2(self, t: int, kind: str = "beta_tilde") -> float:
        """Reverse-step variance: beta_t, or the posterior beta_tilde_t."""
        self._check_t(t)
        if kind == "beta":
            return float(self.betas[t - 1])
        if kind == "beta_tilde":
            ab_prev = self.alpha_bars[t - 1]
            ab = self.alpha_bars[t]
            return float(self.betas[t - 1] * (1.0 - ab_prev) / (1.0 - ab))
        raise ValueError(f"sigma kind must be one of {SIGMA_KINDS}, got {kind!r}")


def _finish_schedule(kind: str, betas: np.ndarray, spec: dict) -> NoiseSchedule:
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind=kind, betas=betas, alpha_bars=alpha_bars, spec=spec)


def linear_schedule(t_diff: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced over [beta_start, beta_end], endpoints included."""
    if t_diff < 1:
        raise ValueError(f"need at least one diffusion step, got {t_diff}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, t_diff)
    spec = {"kind": "linear", "t_diff": t_diff, "beta_start": beta_start, "beta_end": beta_end}
    return _finish_schedule("linear", betas, spec)


def cosine_schedule(t_diff: int, s: float = 0.008, beta_clip: float = 0.999) -> NoiseSchedule:
    """Squared-cosine signal retention: abar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1+s)) pi/2).

    Betas derive from consecutive abar ratios and are clipped above; alpha_bars
    are then recomputed as the running product of (1 - beta) so the stored
    table is exactly product-consistent.
    """
    if t_diff < 1:
        raise ValueError(f"need at least one diffusion step, got {t_diff}")
    if s <= 0:
        raise ValueError(f"cosine offset s must be > 0, got {s}")
    steps = np.arange(t_diff + 1, dtype=np.float64)
    f = np.cos(((steps / t_diff + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    abar = f / f[0]
    betas = np.clip(1.0 - abar[1:] / abar[:-1], None, beta_clip)
    spec = {"kind": "cosine", "t_diff": t_diff, "s": s, "beta_clip": beta_clip}
    return _finish_schedule("cosine", betas, spec)


def schedule_from_spec(spec: dict) -> NoiseSchedule:
    """Rebuild a schedule from the spec dict stored in checkpoints."""
    kind = spec.get("kind")
    if kind == "linear":
        return linear_schedule(spec["t_diff"], spec["beta_start"], spec["beta_end"])
    if kind == "cosine":
        return cosine_schedule(spec["t_diff"], spec["s"], spec.get("beta_clip", 0.999))
    raise ValueError(f"unknown schedule kind {kind!r}")


def _factor(values, x_ndim: int):
    """Broadcast per-sample scalars over the trailing sample axes."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (x_ndim - values.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Direct forward kernel: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    `t` may be a single step or one step per leading-axis sample.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.num_steps):
        raise ValueError(f"t={t} outside 1..{sched.num_steps}")
    ab = _factor(sched.alpha_bars[t_arr], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Clean estimate: x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    sched._check_t(t)
    ab = sched.alpha_bars[t]
    if ab < 1e-12:
        raise ValueError(f"alpha_bar at t={t} is {ab:.3e}; clean estimate is numerically meaningless")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Reverse mean: mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t)."""
    sched._check_t(t)
    beta = sched.betas[t - 1]
    ab = sched.alpha_bars[t]
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(1.0 - beta)


def p_sample(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    sched: NoiseSchedule,
    sigma_kind: str = "beta_tilde",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One reverse step: mu + sigma_t * z, with z = 0 forced at the final step t=1."""
    mu = posterior_mean(x_t, t, eps_hat, sched)
    if t == 1:
        return mu
    if rng is None:
        raise ValueError("rng required for t > 1")
    sigma = np.sqrt(sched.sigma2(t, sigma_kind))
    return mu + sigma * rng.standard_normal(mu.shape)


def sample_loop(
    denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    shape: tuple,
    sigma_kind: str = "beta_tilde",
) -> np.ndarray:
    """Ancestral sampling: x_T ~ N(0, I), then reverse steps t = T..1.

    `denoiser(x, t) -> eps_hat` is any callable matching shapes.
    """
    x = rng.standard_normal(shape)
    for t in range(sched.num_steps, 0, -1):
        eps_hat = np.asarray(denoiser(x, t), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {x.shape}")
        x = p_sample(x, t, eps_hat, sched, sigma_kind, rng)
    return x


def schedule_to_csv(sched: NoiseSchedule, path) -> None:
    """Table of (t, beta, alpha_bar) rows for inspection and regression fixtures."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "beta", "alpha_bar"])
        writer.writerow([0, "", repr(float(sched.alpha_bars[0]))])
        for t in range(1, sched.num_steps + 1):
            writer.writerow([t, repr(float(sched.betas[t - 1])), repr(float(sched.alpha_bars[t]))])
