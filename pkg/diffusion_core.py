"""
Noise schedules, forward noising, clean-image prediction, deterministic DDIM
sampling/inversion and the DSM objective.

Every function is a pure function of its inputs; randomness (eps, x_T) is always
passed in by the caller. Arrays may be a single vector of shape (d_x,) or a
batch of shape (B, d_x).
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidArgumentError, ScheduleError

Condition = Tuple[int, ...]
Timestep = Union[int, np.ndarray]


class ScheduleKind(str, Enum):
    LINEAR_BETA = "linear-beta"
    COSINE = "cosine"
    CUSTOM = "custom"


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time table alpha_bar[0..T] with alpha_bar[0] = 1"""

    alpha_bar: np.ndarray
    kind: ScheduleKind = ScheduleKind.CUSTOM

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise InvalidArgumentError("alpha_bar needs at least two entries (t = 0 and t = T)")
        if ab[0] != 1.0:
            raise InvalidArgumentError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise InvalidArgumentError("alpha_bar must be strictly decreasing in t")
        if not ab[-1] > 0:
            raise ScheduleError("alpha_bar[T] must be positive")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "kind", ScheduleKind(self.kind))

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    @classmethod
    def linear_beta(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(alpha_bar, ScheduleKind.LINEAR_BETA)

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        f = np.cos((np.arange(T + 1, dtype=np.float64) / T + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(alpha_bar, ScheduleKind.COSINE)

    @classmethod
    def from_config(cls, cfg) -> "NoiseSchedule":
        if cfg.kind == ScheduleKind.COSINE.value:
            return cls.cosine(cfg.T)
        return cls.linear_beta(cfg.T, cfg.beta_start, cfg.beta_end)

    def check_t(self, t: Timestep, allow_zero: bool = True) -> np.ndarray:
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise InvalidArgumentError(f"timesteps must be integers, got {t_arr.dtype}")
        low = 0 if allow_zero else 1
        if np.any(t_arr < low) or np.any(t_arr > self.T):
            raise InvalidArgumentError(f"timestep outside [{low}, {self.T}]: {t}")
        return t_arr

    def coefficients(self, t: Timestep) -> Tuple[np.ndarray, np.ndarray]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) shaped to broadcast against x"""
        ab = self.alpha_bar[self.check_t(t)]
        if np.ndim(ab) == 1:
            ab = ab[:, None]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


@dataclass(frozen=True)
class DataPoint:
    x0: np.ndarray
    concept_id: int
    style_id: int
    sample_id: int

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float64)
        if x0.ndim != 1:
            raise InvalidArgumentError("x0 must be a flattened vector")
        if np.any(x0 < -1.0) or np.any(x0 > 1.0):
            raise InvalidArgumentError(f"sample {self.sample_id}: x0 entries must lie in [-1, 1]")
        object.__setattr__(self, "x0", x0)


@dataclass(frozen=True)
class NoisyState:
    """x_t at integer timestep t; t = 0 denotes the clean endpoint"""

    xt: np.ndarray
    t: int


def check_unique_ids(data: Sequence[DataPoint]) -> None:
    ids = [p.sample_id for p in data]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("sample_id must be unique within a dataset")


def _check_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a)[-1] != np.shape(b)[-1]:
        raise InvalidArgumentError(f"{what}: dimension mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_noise(x0: np.ndarray, t: Timestep, eps: np.ndarray, sched: NoiseSchedule) -> NoisyState:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps"""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape[-1] != eps.shape[-1]:
        raise InvalidArgumentError(f"forward_noise: dimension mismatch {x0.shape} vs {eps.shape}")
    a, s = sched.coefficients(t)
    return NoisyState(a * x0 + s * eps, t)


def predict_x0(xt: NoisyState, eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)"""
    _check_dims(xt.xt, eps_pred, "predict_x0")
    a, s = sched.coefficients(xt.t)
    if np.any(a <= 0):
        raise ScheduleError(f"alpha_bar_t must be positive at t={xt.t}")
    return (xt.xt - s * eps_pred) / a


def ddim_step(xt: NoisyState, eps_pred: np.ndarray, t_next: int, sched: NoiseSchedule) -> NoisyState:
    """Deterministic (eta = 0) DDIM move from t to t_next, in either direction"""
    sched.check_t(t_next)
    if t_next == xt.t:
        return xt
    x0_hat = predict_x0(xt, eps_pred, sched)
    if t_next == 0:
        return NoisyState(x0_hat, 0)
    a, s = sched.coefficients(t_next)
    return NoisyState(a * x0_hat + s * eps_pred, int(t_next))


@dataclass(frozen=True)
class CFGGuidance:
    """Classifier-free guidance: eps_c + scale * (eps_c - eps_uncond)"""

    scale: float = 1.0
    uncond: Optional[Condition] = None


def guided_eps(model, x: np.ndarray, t: Timestep, cond: Condition, guidance: Optional[CFGGuidance] = None) -> np.ndarray:
    eps_c = model.eps(x, t, cond)
    if guidance is None or guidance.scale == 0.0:
        return eps_c
    uncond = guidance.uncond if guidance.uncond is not None else model.null_condition
    eps_u = model.eps(x, t, uncond)
    return eps_c + guidance.scale * (eps_c - eps_u)


def uniform_steps(t_end: int, n: int) -> List[int]:
    """Increasing list 0 = s_0 < ... < s_n = t_end of (at most n + 1) rounded points"""
    if t_end == 0:
        return [0]
    pts = np.rint(np.linspace(0, t_end, min(n, t_end) + 1)).astype(np.int64)
    return [int(p) for p in np.unique(pts)]


def _check_monotone(steps: Sequence[int], increasing: bool, what: str) -> List[int]:
    steps = [int(s) for s in steps]
    if not steps:
        raise InvalidArgumentError(f"{what}: empty step list")
    diffs = np.diff(steps)
    if increasing and np.any(diffs <= 0):
        raise InvalidArgumentError(f"{what}: steps must be strictly increasing, got {steps}")
    if not increasing and np.any(diffs >= 0):
        raise InvalidArgumentError(f"{what}: steps must be strictly decreasing, got {steps}")
    return steps


def ddim_transport(model, cond: Condition, x: np.ndarray, steps: Sequence[int],
                   guidance: Optional[CFGGuidance] = None, sched: Optional[NoiseSchedule] = None) -> List[NoisyState]:
    """Run DDIM along a strictly decreasing step list that may stop before t = 0"""
    sched = sched or model.schedule
    steps = _check_monotone(steps, increasing=False, what="ddim_transport")
    for s in steps:
        sched.check_t(s)
    state = NoisyState(np.asarray(x, dtype=np.float64), steps[0])
    trajectory = [state]
    for t_next in steps[1:]:
        eps = guided_eps(model, state.xt, state.t, cond, guidance)
        state = ddim_step(state, eps, t_next, sched)
        trajectory.append(state)
    return trajectory


def ddim_sample(model, cond: Condition, xT: np.ndarray, steps: Sequence[int],
                guidance: Optional[CFGGuidance] = None, sched: Optional[NoiseSchedule] = None) -> List[NoisyState]:
    """Full deterministic trajectory from T to 0; the last state is the sample"""
    sched = sched or model.schedule
    steps = _check_monotone(steps, increasing=False, what="ddim_sample")
    if steps[0] != sched.T or steps[-1] != 0:
        raise InvalidArgumentError(f"ddim_sample: steps must run from T={sched.T} to 0, got {steps[0]}..{steps[-1]}")
    return ddim_transport(model, cond, xT, steps, guidance, sched)


def sampling_steps(sched: NoiseSchedule, n: int) -> List[int]:
    return uniform_steps(sched.T, n)[::-1]


def ddim_invert_trajectory(model, cond: Condition, x0: np.ndarray, steps: Sequence[int],
                           sched: Optional[NoiseSchedule] = None) -> List[NoisyState]:
    """Naive DDIM inversion: eps is predicted at the current latent, then stepped up"""
    sched = sched or model.schedule
    steps = _check_monotone(steps, increasing=True, what="ddim_invert")
    if steps[0] != 0:
        raise InvalidArgumentError("ddim_invert: steps must start at 0")
    state = NoisyState(np.asarray(x0, dtype=np.float64), 0)
    trajectory = [state]
    for t_next in steps[1:]:
        eps = model.eps(state.xt, state.t, cond)
        state = ddim_step(state, eps, t_next, sched)
        trajectory.append(state)
    return trajectory


def ddim_invert(model, cond: Condition, x0: np.ndarray, t_target: int, steps: Optional[Sequence[int]] = None,
                sched: Optional[NoiseSchedule] = None) -> NoisyState:
    sched = sched or model.schedule
    sched.check_t(t_target)
    if steps is None:
        steps = uniform_steps(t_target, 50)
    steps = list(steps)
    if steps[-1] != t_target:
        raise InvalidArgumentError(f"ddim_invert: steps must end at t_target={t_target}")
    return ddim_invert_trajectory(model, cond, x0, steps, sched)[-1]


def dsm_loss(model, x0: np.ndarray, cond: Condition, t: int, eps: np.ndarray,
             sched: Optional[NoiseSchedule] = None) -> float:
    """||eps - eps_theta(x_t, t; cond)||^2 with x_t = forward_noise(x0, t, eps)"""
    sched = sched or model.schedule
    state = forward_noise(x0, t, eps, sched)
    residual = eps - model.eps(state.xt, t, cond)
    return float(np.sum(residual * residual))


def ddim_roundtrip_errors(model, conds: Sequence[Condition], x0s: np.ndarray, step_counts: Sequence[int],
                          sched: Optional[NoiseSchedule] = None) -> dict:
    """Mean relative L2 error of invert-then-sample, per number of DDIM steps"""
    sched = sched or model.schedule
    errors = {}
    for n in step_counts:
        up = uniform_steps(sched.T, n)
        rel = []
        for x0, cond in zip(x0s, conds):
            latent = ddim_invert_trajectory(model, cond, x0, up, sched)[-1]
            recon = ddim_sample(model, cond, latent.xt, up[::-1], sched=sched)[-1].xt
            rel.append(np.linalg.norm(recon - x0) / max(np.linalg.norm(x0), 1e-12))
        errors[int(n)] = float(np.mean(rel))
    return errors
