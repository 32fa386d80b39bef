"""
Parameter-space gradients used for attribution.

Every loss here is a stop-gradient regression ||target - eps_theta||^2 where the
target is materialised as a constant before differentiation. The guidance
residual delta = target - eps_theta therefore fixes the gradient as
-2 J^T delta. Residuals per loss:

    dsm          eps - eps_theta
    dps          scale * grad_{x_t} ||x0_hat - x0||^2, scale = w (* sqrt(1 - ab_t))
    slider       (1/beta) (eps(c+) - eps(c-))
    external     -(1/beta) grad_{x_t} R(x0_hat)
    preference   -grad_{x_t} R(x+, x-)
    dtrak        -eps_theta  (gradient of ||eps_theta||^2)

Per-timestep gradients are optionally normalised to unit length before
averaging, which removes any positive scale. With normalisation on, the scale
is dropped before differentiation so that rescaling w or 1/beta changes
nothing, bit for bit.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from diffusion_core import (
    CFGGuidance,
    Condition,
    NoiseSchedule,
    NoisyState,
    ddim_invert_trajectory,
    ddim_transport,
    forward_noise,
    uniform_steps,
)
from errors import InvalidArgumentError, NumericalError, require_finite
from logs import get_logger
from scorenet import DenoiserModel, ScalarHead, SquaredDistanceHead, grad_input

logger = get_logger(__name__)

ZERO_NORM = 1e-12


class GuidanceKind(str, Enum):
    DPS = "dps"
    SLIDER = "slider"
    EXTERNAL = "external"
    PREFERENCE = "preference"
    DSM_RESIDUAL = "dsm-residual"
    DTRAK = "dtrak"


class LossKind(str, Enum):
    """Loss that produced a stored gradient; the code is the on-disk u8"""

    DSM = "dsm"
    DPS = "dps"
    DTRAK = "dtrak"
    REWARD_DPS = "reward-dps"
    PREFERENCE = "preference"

    @property
    def code(self) -> int:
        return list(LossKind).index(self)

    @classmethod
    def from_code(cls, code: int) -> "LossKind":
        return list(cls)[code]


@dataclass(frozen=True)
class GuidanceVector:
    """Residual delta = scale * direction at timestep t.

    `parts` is set when the residual lives on more than one noisy state
    (preference pairs); each entry is (state, direction part) and the
    parameter gradient sums the pullback of every part.
    """

    direction: np.ndarray
    kind: GuidanceKind
    t: Union[int, np.ndarray]
    scale: Union[float, np.ndarray] = 1.0
    parts: Tuple[Tuple[NoisyState, np.ndarray], ...] = ()

    def __post_init__(self):
        try:
            require_finite(self.direction, f"{self.kind.value} guidance")
        except NumericalError as e:
            raise NumericalError(f"{e} at t={self.t}") from None
        if np.any(np.asarray(self.scale) <= 0):
            raise InvalidArgumentError("guidance scale must be positive")

    @property
    def delta(self) -> np.ndarray:
        return self.scale * self.direction


@dataclass(frozen=True)
class ConceptTrio:
    c_base: Condition
    c_pos: Condition
    c_neg: Condition
    beta_inv: float = 1.0

    def __post_init__(self):
        if not self.beta_inv > 0:
            raise InvalidArgumentError("beta_inv must be positive")

    def validate(self, model: DenoiserModel) -> None:
        for c in (self.c_base, self.c_pos, self.c_neg):
            if not c or any(not 0 <= r < model.n_rows for r in c):
                raise InvalidArgumentError(f"condition {c} is not resolvable in cond_table ({model.n_rows} rows)")

    def describe(self) -> str:
        return f"slider(base={list(self.c_base)}, pos={list(self.c_pos)}, neg={list(self.c_neg)}, beta_inv={self.beta_inv})"


@dataclass(frozen=True)
class PreferencePair:
    x_plus: np.ndarray
    x_minus: np.ndarray

    def __post_init__(self):
        if np.shape(self.x_plus) != np.shape(self.x_minus) or np.ndim(self.x_plus) != 1:
            raise InvalidArgumentError("preference pair members must be vectors of equal dimension")


@dataclass
class AggregatedGradient:
    g: np.ndarray
    n_timesteps: int
    normalized: bool
    source: str
    loss_kind: LossKind
    degenerate: bool = False
    n_dropped: int = 0

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.g))


# --- reward plug-ins on x0_hat -------------------------------------------------
class SquaredDistanceReward(ScalarHead):
    """R(x) = -||x - reference||^2"""

    def __init__(self, reference: np.ndarray):
        self.reference = np.asarray(reference, dtype=np.float64)

    def value(self, x0_hat):
        diff = x0_hat - self.reference
        return -np.sum(diff * diff, axis=-1)

    def grad(self, x0_hat):
        return -2.0 * (x0_hat - self.reference)

    def describe(self):
        return "neg-squared-distance"


class TemplateReward(ScalarHead):
    """Cosine similarity to a fixed template"""

    def __init__(self, template: np.ndarray, name: str = "template"):
        self.template = np.asarray(template, dtype=np.float64)
        self.name = name

    def value(self, x0_hat):
        tn = np.linalg.norm(self.template)
        xn = np.maximum(np.linalg.norm(x0_hat, axis=-1), 1e-12)
        return (x0_hat @ self.template) / (xn * tn)

    def grad(self, x0_hat):
        tn = np.linalg.norm(self.template)
        xn = np.maximum(np.linalg.norm(x0_hat, axis=-1, keepdims=True), 1e-12)
        dot = (x0_hat @ self.template)[..., None]
        return self.template / (xn * tn) - dot * x0_hat / (xn ** 3 * tn)

    def describe(self):
        return f"cosine({self.name})"


# --- guidance --------------------------------------------------------------------
def _sigma(sched: NoiseSchedule, t) -> Union[float, np.ndarray]:
    return sched.coefficients(t)[1]


def dps_guidance(model: DenoiserModel, x0i: np.ndarray, xti: NoisyState, w: float = 1.0,
                 cond: Optional[Condition] = None, sigma_scaling: bool = True) -> GuidanceVector:
    """delta = w * sqrt(1 - ab_t) * grad_{x_t} ||x0_hat - x0||^2 (the sqrt factor only when sigma_scaling)"""
    if not w > 0:
        raise InvalidArgumentError("w must be positive")
    cond = model.null_condition if cond is None else cond
    direction = grad_input(model, xti, cond, SquaredDistanceHead(x0i))
    scale = w * _sigma(model.schedule, xti.t) if sigma_scaling else w
    return GuidanceVector(direction, GuidanceKind.DPS, xti.t, scale)


def slider_guidance(model: DenoiserModel, xt: NoisyState, trio: ConceptTrio) -> GuidanceVector:
    trio.validate(model)
    eps_pos = model.eps(xt.xt, xt.t, trio.c_pos)
    eps_neg = model.eps(xt.xt, xt.t, trio.c_neg)
    return GuidanceVector(eps_pos - eps_neg, GuidanceKind.SLIDER, xt.t, trio.beta_inv)


def external_reward_guidance(model: DenoiserModel, xt: NoisyState, reward_fn: ScalarHead,
                             beta_inv: float = 1.0, cond: Optional[Condition] = None) -> GuidanceVector:
    """delta = -(1/beta) grad_{x_t} R(x0_hat)"""
    cond = model.null_condition if cond is None else cond
    try:
        grad = grad_input(model, xt, cond, reward_fn)
    except NumericalError:
        raise
    except Exception as e:
        raise NumericalError(f"reward {reward_fn.describe()} failed at t={xt.t}: {e}") from e
    return GuidanceVector(-grad, GuidanceKind.EXTERNAL, xt.t, beta_inv)


def preference_guidance(model: DenoiserModel, xt_pair: Tuple[NoisyState, NoisyState], pair: PreferencePair,
                        cond: Optional[Condition] = None) -> GuidanceVector:
    """delta = -grad R(x+, x-) with w = 1, summed over the two noisy states"""
    xt_plus, xt_minus = xt_pair
    if not np.array_equal(np.asarray(xt_plus.t), np.asarray(xt_minus.t)):
        raise InvalidArgumentError(f"preference states at different timesteps: {xt_plus.t} vs {xt_minus.t}")
    cond = model.null_condition if cond is None else cond

    def term(state, target):
        return grad_input(model, state, cond, SquaredDistanceHead(target))

    # grad R = -(a(+,x+) + a(-,x+)) + (a(+,x-) + a(-,x-)); delta = -grad R
    part_plus = term(xt_plus, pair.x_plus) - term(xt_plus, pair.x_minus)
    part_minus = term(xt_minus, pair.x_plus) - term(xt_minus, pair.x_minus)
    return GuidanceVector(part_plus + part_minus, GuidanceKind.PREFERENCE, xt_plus.t,
                          parts=((xt_plus, part_plus), (xt_minus, part_minus)))


# --- stop-gradient losses --------------------------------------------------------
def stop_gradient_loss_gradient(model: DenoiserModel, xt: NoisyState, cond, target: np.ndarray,
                                per_example: bool = False) -> np.ndarray:
    """grad_theta ||sg[target] - eps_theta||^2 over the base parameters"""
    eps, cache = model.forward(xt.xt, xt.t, cond)
    return model.backward(cache, 2.0 * (eps - target), per_example=per_example, include_tokens=False)[0]


def residual_gradient(model: DenoiserModel, xt: NoisyState, cond, delta: np.ndarray,
                      per_example: bool = False) -> np.ndarray:
    """-2 J^T delta through the direct VJP"""
    eps, cache = model.forward(xt.xt, xt.t, cond)
    return model.backward(cache, -2.0 * np.asarray(delta), per_example=per_example, include_tokens=False)[0]


def gradient_identity_gap(model: DenoiserModel, xt: NoisyState, cond, guidance: GuidanceVector) -> float:
    """Max abs difference between the stop-gradient loss path and -2 J^T delta"""
    eps = model.eps(xt.xt, xt.t, cond)
    via_loss = stop_gradient_loss_gradient(model, xt, cond, eps + guidance.delta)
    direct = residual_gradient(model, xt, cond, guidance.delta)
    return float(np.max(np.abs(via_loss - direct)))


def _guided_gradients(model: DenoiserModel, states: NoisyState, cond, guidance: GuidanceVector,
                      normalize: bool) -> np.ndarray:
    """Per-row parameter gradients for a batch of states sharing `cond`"""
    residual = guidance.direction if normalize else guidance.delta
    eps = model.eps(states.xt, states.t, cond)
    return stop_gradient_loss_gradient(model, states, cond, eps + residual, per_example=True)


def aggregate_gradients(rows: Iterable[np.ndarray], normalize: bool, d: int) -> Tuple[np.ndarray, int, int, bool]:
    """Average per-timestep gradients in the order given.

    Returns (g, n_used, n_dropped, degenerate). Under normalisation rows with
    norm < 1e-12 are dropped; if all are dropped the result is a zero vector
    flagged degenerate.
    """
    total = np.zeros(d)
    n_used = n_dropped = 0
    all_zero = True
    for g in rows:
        norm = float(np.linalg.norm(g))
        if norm < ZERO_NORM:
            n_dropped += 1
            if normalize:
                continue
        else:
            all_zero = False
        total += g / norm if normalize else g
        n_used += 1
    if n_used == 0 or all_zero:
        return np.zeros(d), n_used, n_dropped, True
    return total / n_used, n_used, n_dropped, False


def _chunks(n: int, size: int) -> List[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _finish(rows_iter, normalize, model, n, source, kind) -> AggregatedGradient:
    g, _, dropped, degenerate = aggregate_gradients(rows_iter, normalize, model.n_base_params)
    require_finite(g, f"{kind.value} gradient for {source}")
    if degenerate:
        logger.warning(f"{kind.value} gradient for {source} is degenerate ({dropped}/{n} zero-norm terms)")
    return AggregatedGradient(g, n, normalize, source, kind, degenerate, dropped)


def _iter_rows(blocks):
    for block in blocks:
        yield from block


def training_timesteps(T: int, N: int) -> List[int]:
    """t_n = round(n T / N) for n = 1..N"""
    if N < 1:
        raise InvalidArgumentError("number of timesteps must be >= 1")
    if N > T:
        raise InvalidArgumentError(f"N={N} exceeds T={T}")
    return [int(round(n * T / N)) for n in range(1, N + 1)]


def _training_latents(model: DenoiserModel, x0i: np.ndarray, cond: Condition, ts: List[int],
                      use_ddim_inversion: bool, ddim_steps: int, rng: Optional[np.random.Generator]) -> NoisyState:
    sched = model.schedule
    t_arr = np.asarray(ts, dtype=np.int64)
    if use_ddim_inversion:
        grid = sorted(set(uniform_steps(sched.T, ddim_steps)) | set(ts) | {0})
        trajectory = ddim_invert_trajectory(model, cond, x0i, grid)
        by_t = {s.t: s.xt for s in trajectory}
        return NoisyState(np.stack([by_t[t] for t in ts]), t_arr)
    if rng is None:
        raise InvalidArgumentError("forward-noised latents need a seed")
    eps = rng.standard_normal((len(ts), x0i.size))
    return forward_noise(np.broadcast_to(x0i, eps.shape), t_arr, eps, sched)


def dps_train_gradient(model: DenoiserModel, x0i: np.ndarray, cond: Condition, N: int,
                       sched: Optional[NoiseSchedule] = None, *, w: float = 1.0, sigma_scaling: bool = True,
                       use_ddim_inversion: bool = True, normalize: bool = True, ddim_steps: int = 50,
                       seed=None, source: str = "", chunk: int = 16) -> AggregatedGradient:
    """Training gradient of one sample under the DPS loss at t_n = round(nT/N), ascending n.

    With use_ddim_inversion the latents come from one inversion pass over the
    union of the ddim_steps grid and the t_n, so every t_n is visited exactly
    and the pass takes up to ddim_steps + N steps.
    """
    if sched is not None and sched is not model.schedule and not np.array_equal(sched.alpha_bar, model.schedule.alpha_bar):
        raise InvalidArgumentError("schedule differs from the model's schedule")
    sched = model.schedule
    x0i = np.asarray(x0i, dtype=np.float64)
    ts = training_timesteps(sched.T, N)
    rng = None if seed is None else np.random.default_rng(seed)
    states = _training_latents(model, x0i, cond, ts, use_ddim_inversion, ddim_steps, rng)

    def blocks():
        for sl in _chunks(N, chunk):
            part = NoisyState(states.xt[sl], states.t[sl])
            guidance = dps_guidance(model, x0i, part, w, cond, sigma_scaling)
            yield _guided_gradients(model, part, cond, guidance, normalize)

    return _finish(_iter_rows(blocks()), normalize, model, N, source or "dps", LossKind.DPS)


def _draws(rng: np.random.Generator, T: int, n: int, d_x: int) -> Tuple[np.ndarray, np.ndarray]:
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, d_x))
    return t, eps


def dsm_train_gradient_baseline(model: DenoiserModel, x0i: np.ndarray, cond: Condition, N: int, seed,
                                normalize: bool = False, source: str = "", chunk: int = 16) -> AggregatedGradient:
    """Monte Carlo DSM gradient averaged over N seeded (t, eps) draws"""
    if N < 1:
        raise InvalidArgumentError("N must be >= 1")
    rng = np.random.default_rng(seed)
    t, eps = _draws(rng, model.schedule.T, N, model.d_x)
    x0i = np.asarray(x0i, dtype=np.float64)

    def blocks():
        for sl in _chunks(N, chunk):
            state = forward_noise(np.broadcast_to(x0i, eps[sl].shape), t[sl], eps[sl], model.schedule)
            yield stop_gradient_loss_gradient(model, state, cond, eps[sl], per_example=True)

    return _finish(_iter_rows(blocks()), normalize, model, N, source or "dsm", LossKind.DSM)


def dtrak_gradient_baseline(model: DenoiserModel, x0i: np.ndarray, cond: Condition, N: int, seed,
                            normalize: bool = False, source: str = "", chunk: int = 16) -> AggregatedGradient:
    """grad_theta ||eps_theta(x_t, t)||^2 = 2 J^T eps_theta, averaged over N draws"""
    if N < 1:
        raise InvalidArgumentError("N must be >= 1")
    rng = np.random.default_rng(seed)
    t, eps = _draws(rng, model.schedule.T, N, model.d_x)
    x0i = np.asarray(x0i, dtype=np.float64)

    def blocks():
        for sl in _chunks(N, chunk):
            state = forward_noise(np.broadcast_to(x0i, eps[sl].shape), t[sl], eps[sl], model.schedule)
            yield stop_gradient_loss_gradient(model, state, cond, np.zeros_like(eps[sl]), per_example=True)

    return _finish(_iter_rows(blocks()), normalize, model, N, source or "dtrak", LossKind.DTRAK)


# --- utility gradients ----------------------------------------------------------
class RewardProvider(ABC):
    """Supplies delta(x_t, t) on a batch of states plus a descriptor for reports"""

    cond: Condition

    @abstractmethod
    def guidance(self, model: DenoiserModel, states: NoisyState) -> GuidanceVector:
        ...

    @abstractmethod
    def describe(self) -> str:
        ...


class SliderReward(RewardProvider):
    def __init__(self, trio: ConceptTrio):
        self.trio = trio
        self.cond = trio.c_base

    def guidance(self, model, states):
        return slider_guidance(model, states, self.trio)

    def describe(self):
        return self.trio.describe()


class ExternalReward(RewardProvider):
    def __init__(self, reward_fn: ScalarHead, cond: Condition, beta_inv: float = 1.0):
        self.reward_fn = reward_fn
        self.cond = tuple(cond)
        self.beta_inv = beta_inv

    def guidance(self, model, states):
        return external_reward_guidance(model, states, self.reward_fn, self.beta_inv, self.cond)

    def describe(self):
        return f"external({self.reward_fn.describe()}, cond={list(self.cond)}, beta_inv={self.beta_inv})"


def _trajectory_states(model: DenoiserModel, cond: Condition, xT: np.ndarray, ts: np.ndarray,
                       guidance: Optional[CFGGuidance], sampling_steps: int) -> NoisyState:
    """DDIM from T down to each requested t along one trajectory; states in the order of ts"""
    sched = model.schedule
    grid = set(uniform_steps(sched.T, sampling_steps)) | {int(t) for t in ts} | {sched.T}
    steps = sorted((s for s in grid if s >= int(ts.min())), reverse=True)
    trajectory = ddim_transport(model, cond, xT, steps, guidance)
    by_t = {s.t: s.xt for s in trajectory}
    return NoisyState(np.stack([by_t[int(t)] for t in ts]), ts.astype(np.int64))


def reward_dps_utility_gradient(model: DenoiserModel, reward: RewardProvider, M: int, N: int,
                                sched: Optional[NoiseSchedule] = None, seed=0, *, normalize: bool = True,
                                cfg_scale: float = 1.0, sampling_steps: int = 50,
                                first_latent: Optional[np.ndarray] = None, chunk: int = 16) -> AggregatedGradient:
    """Reward-guided utility gradient over M seeded trajectories x N uniform timesteps each.

    When `first_latent` is given it seeds the first trajectory (the query's own x_T).
    """
    if M < 1 or N < 1:
        raise InvalidArgumentError("M and N must be >= 1")
    sched = model.schedule
    rng = np.random.default_rng(seed)
    guidance = CFGGuidance(cfg_scale) if cfg_scale > 0 else None
    cond = reward.cond

    def blocks():
        for m in range(M):
            xT = rng.standard_normal(model.d_x)
            if m == 0 and first_latent is not None:
                xT = np.asarray(first_latent, dtype=np.float64)
            ts = rng.integers(1, sched.T + 1, size=N)
            states = _trajectory_states(model, cond, xT, ts, guidance, sampling_steps)
            for sl in _chunks(N, chunk):
                part = NoisyState(states.xt[sl], states.t[sl])
                yield _guided_gradients(model, part, cond, reward.guidance(model, part), normalize)

    return _finish(_iter_rows(blocks()), normalize, model, M * N, reward.describe(), LossKind.REWARD_DPS)


def preference_utility_gradient(model: DenoiserModel, pairs: Sequence[PreferencePair], N: int, seed=0, *,
                                cond: Optional[Condition] = None, normalize: bool = True,
                                use_ddim_inversion: bool = False, ddim_steps: int = 50) -> AggregatedGradient:
    """Reward-DPS aggregation of preference guidance over pairs x N uniform timesteps"""
    if not pairs or N < 1:
        raise InvalidArgumentError("need at least one preference pair and N >= 1")
    sched = model.schedule
    cond = model.null_condition if cond is None else tuple(cond)
    rng = np.random.default_rng(seed)

    def rows():
        for pair in pairs:
            ts = rng.integers(1, sched.T + 1, size=N)
            eps = rng.standard_normal((N, model.d_x))
            if use_ddim_inversion:
                plus = _training_latents(model, pair.x_plus, cond, list(ts), True, ddim_steps, None)
                minus = _training_latents(model, pair.x_minus, cond, list(ts), True, ddim_steps, None)
            else:
                plus = forward_noise(np.broadcast_to(pair.x_plus, eps.shape), ts, eps, sched)
                minus = forward_noise(np.broadcast_to(pair.x_minus, eps.shape), ts, eps, sched)
            for n in range(N):
                sp = NoisyState(plus.xt[n], int(ts[n]))
                sm = NoisyState(minus.xt[n], int(ts[n]))
                gv = preference_guidance(model, (sp, sm), pair, cond)
                g = np.zeros(model.n_base_params)
                for state, part in gv.parts:
                    eps_s = model.eps(state.xt, state.t, cond)
                    g += stop_gradient_loss_gradient(model, state, cond, eps_s + part)
                yield g

    desc = f"preference(pairs={len(pairs)}, cond={list(cond)})"
    return _finish(rows(), normalize, model, len(pairs) * N, desc, LossKind.PREFERENCE)


def dsm_utility_gradient(model: DenoiserModel, queries: np.ndarray, cond: Condition, N: int, seed,
                         normalize: bool = False) -> AggregatedGradient:
    """TRAK-style utility: DSM gradient of the query generations themselves, averaged"""
    return _query_average(model, queries, cond, N, seed, normalize, dsm_train_gradient_baseline, LossKind.DSM)


def dtrak_utility_gradient(model: DenoiserModel, queries: np.ndarray, cond: Condition, N: int, seed,
                           normalize: bool = False) -> AggregatedGradient:
    return _query_average(model, queries, cond, N, seed, normalize, dtrak_gradient_baseline, LossKind.DTRAK)


def _query_average(model, queries, cond, N, seed, normalize, fn, kind) -> AggregatedGradient:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    parts = [fn(model, q, cond, N, base + (i,), normalize) for i, q in enumerate(queries)]
    g = np.mean([p.g for p in parts], axis=0)
    return AggregatedGradient(g, N * len(parts), normalize, f"{kind.value}(queries={len(parts)}, cond={list(cond)})",
                              kind, all(p.degenerate for p in parts), sum(p.n_dropped for p in parts))
