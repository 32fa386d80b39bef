"""
Conditional noise-prediction MLP with hand-written reverse-mode derivatives.

Architecture: [x_t, sinusoidal(t)] -> Linear -> (+ condition embedding) -> SiLU
-> (Linear -> SiLU) x (L - 1) -> Linear -> eps. A condition is a tuple of
cond_table row ids whose embeddings are summed; concept k is (k,), the null
condition is (n_concepts,), a learned token in context is (k, token_id).

Parameters live in one flat float64 vector (`flat`: all layers followed by the
base cond_table rows, null row included). Learned token rows are appended in a
separate table so the base parameter space, which attribution works in, never
changes size.
"""

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from containers import read_container, write_container
from diffusion_core import (
    Condition,
    DataPoint,
    NoiseSchedule,
    NoisyState,
    ScheduleKind,
    forward_noise,
)
from errors import InvalidArgumentError, StorageError, TrainingFailureError
from logs import get_logger

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"CTRK"
CHECKPOINT_VERSION = 1

CondSpec = Union[Condition, Sequence[Condition], int]


@dataclass(frozen=True)
class ArchSpec:
    d_x: int
    n_concepts: int
    hidden: int = 256
    n_hidden_layers: int = 3
    time_dim: int = 32
    activation: str = "silu"

    @property
    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = [("W1", (self.hidden, self.d_x + self.time_dim)), ("b1", (self.hidden,))]
        for i in range(2, self.n_hidden_layers + 1):
            shapes += [(f"W{i}", (self.hidden, self.hidden)), (f"b{i}", (self.hidden,))]
        shapes += [("Wout", (self.d_x, self.hidden)), ("bout", (self.d_x,))]
        return shapes

    @property
    def n_layer_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes)

    @property
    def n_base_rows(self) -> int:
        return self.n_concepts + 1

    @property
    def n_base_params(self) -> int:
        return self.n_layer_params + self.n_base_rows * self.hidden

    def to_dict(self) -> dict:
        return {
            "d_x": self.d_x,
            "n_concepts": self.n_concepts,
            "hidden": self.hidden,
            "n_hidden_layers": self.n_hidden_layers,
            "time_dim": self.time_dim,
            "activation": self.activation,
        }


@dataclass
class LearnedToken:
    embedding: np.ndarray
    token_id: int
    exemplar_ids: List[int]
    context: Tuple[int, ...] = ()

    @property
    def condition(self) -> Condition:
        return tuple(self.context) + (self.token_id,)


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(t f_i), cos(t f_i)], f_i = 10000^(-i/half)"""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if feats.shape[1] < dim:
        feats = np.pad(feats, ((0, 0), (0, dim - feats.shape[1])))
    return feats


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class ForwardCache:
    a0: np.ndarray
    membership: np.ndarray
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


class DenoiserModel:
    """eps_theta(x_t, t; c) with parameter- and input-space pullbacks"""

    def __init__(self, arch: ArchSpec, flat: np.ndarray, tokens: Optional[np.ndarray] = None,
                 schedule: Optional[NoiseSchedule] = None, token_meta: Optional[List[LearnedToken]] = None):
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (arch.n_base_params,):
            raise InvalidArgumentError(f"expected {arch.n_base_params} base parameters, got {flat.shape}")
        self.arch = arch
        self.flat = flat
        self.tokens = np.zeros((0, arch.hidden)) if tokens is None else np.array(tokens, dtype=np.float64).reshape(-1, arch.hidden)
        self.schedule = schedule
        self.token_meta: List[LearnedToken] = list(token_meta or [])
        self._bind_views()

    @classmethod
    def init(cls, arch: ArchSpec, seed: int, schedule: Optional[NoiseSchedule] = None,
             zero_cond: bool = True) -> "DenoiserModel":
        """Scaled-uniform fan-in init U(-1/sqrt(fan_in), 1/sqrt(fan_in)); cond rows start at zero"""
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in arch.layer_shapes:
            fan_in = arch.d_x + arch.time_dim if name in ("W1", "b1") else arch.hidden
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        cond = np.zeros(arch.n_base_rows * arch.hidden)
        if not zero_cond:
            cond = rng.normal(0.0, 1.0 / np.sqrt(arch.hidden), size=cond.shape)
        return cls(arch, np.concatenate(parts + [cond]), schedule=schedule)

    def _bind_views(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.arch.layer_shapes:
            n = int(np.prod(shape))
            self.params[name] = self.flat[offset:offset + n].reshape(shape)
            offset += n
        self.base_cond = self.flat[offset:].reshape(self.arch.n_base_rows, self.arch.hidden)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.flat.copy(), self.tokens.copy(), self.schedule,
                             [LearnedToken(t.embedding.copy(), t.token_id, list(t.exemplar_ids), t.context)
                              for t in self.token_meta])

    # --- parameter bookkeeping -------------------------------------------------
    @property
    def d_x(self) -> int:
        return self.arch.d_x

    @property
    def null_id(self) -> int:
        return self.arch.n_concepts

    @property
    def null_condition(self) -> Condition:
        return (self.null_id,)

    @property
    def n_rows(self) -> int:
        return self.arch.n_base_rows + self.tokens.shape[0]

    @property
    def cond_table(self) -> np.ndarray:
        return np.vstack([self.base_cond, self.tokens])

    @property
    def theta(self) -> np.ndarray:
        """Full parameter vector: layers, base cond rows, appended token rows"""
        return np.concatenate([self.flat, self.tokens.ravel()])

    @property
    def n_params(self) -> int:
        return self.flat.size + self.tokens.size

    @property
    def n_base_params(self) -> int:
        return self.flat.size

    def base_hash(self) -> str:
        return hashlib.blake2b(self.flat.tobytes(), digest_size=16).hexdigest()

    def append_token(self, embedding: np.ndarray) -> int:
        embedding = np.asarray(embedding, dtype=np.float64).reshape(1, self.arch.hidden)
        self.tokens = np.vstack([self.tokens, embedding])
        return self.n_rows - 1

    def set_token(self, token_id: int, embedding: np.ndarray) -> None:
        row = token_id - self.arch.n_base_rows
        if not 0 <= row < self.tokens.shape[0]:
            raise InvalidArgumentError(f"{token_id} is not a learned token id")
        self.tokens[row] = embedding

    # --- conditions ----------------------------------------------------------
    def _membership(self, cond: CondSpec, batch: int) -> np.ndarray:
        """(B, n_rows) count matrix; embedding = membership @ cond_table"""
        if isinstance(cond, (int, np.integer)):
            conds = [(int(cond),)] * batch
        elif len(cond) > 0 and all(isinstance(c, (int, np.integer)) for c in cond):
            conds = [tuple(int(c) for c in cond)] * batch
        else:
            conds = [tuple(c) for c in cond]
            if len(conds) != batch:
                raise InvalidArgumentError(f"got {len(conds)} conditions for a batch of {batch}")
        m = np.zeros((batch, self.n_rows))
        for b, c in enumerate(conds):
            if len(c) == 0:
                raise InvalidArgumentError("empty condition")
            for row in c:
                if not 0 <= row < self.n_rows:
                    raise InvalidArgumentError(f"unknown condition id {row} (table has {self.n_rows} rows)")
                m[b, row] += 1.0
        return m

    # --- forward / backward --------------------------------------------------
    def forward(self, x: np.ndarray, t, cond: CondSpec) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.d_x:
            raise InvalidArgumentError(f"expected inputs of dimension {self.d_x}, got {x.shape[1]}")
        batch = x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t), (batch,))
        membership = self._membership(cond, batch)
        a0 = np.concatenate([x, time_features(t_arr, self.arch.time_dim)], axis=1)
        cache = ForwardCache(a0=a0, membership=membership, squeeze=squeeze)
        p = self.params
        h = a0
        for i in range(1, self.arch.n_hidden_layers + 1):
            z = h @ p[f"W{i}"].T + p[f"b{i}"]
            if i == 1:
                z = z + membership @ self.cond_table
            h = silu(z)
            cache.pre.append(z)
            cache.post.append(h)
        out = h @ p["Wout"].T + p["bout"]
        return (out[0] if squeeze else out), cache

    def eps(self, x: np.ndarray, t, cond: CondSpec) -> np.ndarray:
        return self.forward(x, t, cond)[0]

    def backward(self, cache: ForwardCache, cotangent: np.ndarray, need_params: bool = True,
                 per_example: bool = False, include_tokens: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
        """Pull back a cotangent on the output.

        Returns (g_theta, g_x, g_rows): g_theta over the full theta, or over the
        base parameters only when include_tokens is False (B x d when
        per_example), g_x the input-space pullback, g_rows the per-example
        gradient of the first-layer condition input (B x hidden).
        """
        g = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
        if g.shape != (cache.a0.shape[0], self.d_x):
            raise InvalidArgumentError(f"cotangent shape {g.shape} does not match output {(cache.a0.shape[0], self.d_x)}")
        p = self.params
        L = self.arch.n_hidden_layers
        grads: Dict[str, np.ndarray] = {}

        def outer(gz, a):
            return np.einsum("bi,bj->bij", gz, a) if per_example else gz.T @ a

        def total(gz):
            return gz if per_example else gz.sum(axis=0)

        if need_params:
            grads["Wout"] = outer(g, cache.post[-1])
            grads["bout"] = total(g)
        gh = g @ p["Wout"]
        gz = None
        for i in range(L, 0, -1):
            gz = gh * silu_grad(cache.pre[i - 1])
            if need_params:
                a_prev = cache.post[i - 2] if i > 1 else cache.a0
                grads[f"W{i}"] = outer(gz, a_prev)
                grads[f"b{i}"] = total(gz)
            gh = gz @ p[f"W{i}"]
        g_x = gh[:, :self.d_x]
        g_rows = gz

        g_theta = None
        if need_params:
            m = cache.membership if include_tokens else cache.membership[:, :self.arch.n_base_rows]
            if per_example:
                g_cond = np.einsum("br,bh->brh", m, gz).reshape(m.shape[0], -1)
                parts = [grads[name].reshape(m.shape[0], -1) for name, _ in self.arch.layer_shapes]
                g_theta = np.concatenate(parts + [g_cond], axis=1)
            else:
                g_cond = (m.T @ gz).ravel()
                parts = [grads[name].ravel() for name, _ in self.arch.layer_shapes]
                g_theta = np.concatenate(parts + [g_cond])
        if cache.squeeze:
            g_x = g_x[0]
            if g_theta is not None and per_example:
                g_theta = g_theta[0]
        return g_theta, g_x, g_rows


# --- scalar heads on the predicted clean image ---------------------------------
class ScalarHead(ABC):
    """Differentiable scalar function of x0_hat, evaluated row-wise"""

    @abstractmethod
    def value(self, x0_hat: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def grad(self, x0_hat: np.ndarray) -> np.ndarray:
        ...

    def describe(self) -> str:
        return type(self).__name__


class SquaredDistanceHead(ScalarHead):
    """||x0_hat - target||^2"""

    def __init__(self, target: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)

    def value(self, x0_hat):
        diff = x0_hat - self.target
        return np.sum(diff * diff, axis=-1)

    def grad(self, x0_hat):
        return 2.0 * (x0_hat - self.target)

    def describe(self):
        return "squared-distance"


class ConstantHead(ScalarHead):
    def __init__(self, c: float = 0.0):
        self.c = float(c)

    def value(self, x0_hat):
        return np.full(np.shape(x0_hat)[:-1], self.c)

    def grad(self, x0_hat):
        return np.zeros_like(x0_hat)

    def describe(self):
        return f"constant({self.c})"


class LinearHead(ScalarHead):
    """<v, x0_hat>"""

    def __init__(self, v: np.ndarray):
        self.v = np.asarray(v, dtype=np.float64)

    def value(self, x0_hat):
        return x0_hat @ self.v

    def grad(self, x0_hat):
        return np.broadcast_to(self.v, np.shape(x0_hat)).copy()

    def describe(self):
        return "linear"


# --- operations ----------------------------------------------------------------
def eps_forward(model: DenoiserModel, xt: NoisyState, cond: CondSpec) -> np.ndarray:
    return model.eps(xt.xt, xt.t, cond)


def vjp_params(model: DenoiserModel, xt: NoisyState, cond: CondSpec, cotangent: np.ndarray,
               per_example: bool = False) -> np.ndarray:
    """J^T cotangent over the full parameter vector theta (summed over a batch unless per_example)"""
    _, cache = model.forward(xt.xt, xt.t, cond)
    return model.backward(cache, cotangent, per_example=per_example)[0]


def vjp_base_params(model: DenoiserModel, xt: NoisyState, cond: CondSpec, cotangent: np.ndarray,
                    per_example: bool = False) -> np.ndarray:
    """J^T cotangent restricted to the base parameters (the attribution space)"""
    _, cache = model.forward(xt.xt, xt.t, cond)
    return model.backward(cache, cotangent, per_example=per_example, include_tokens=False)[0]


def vjp_input(model: DenoiserModel, xt: NoisyState, cond: CondSpec, cotangent: np.ndarray) -> np.ndarray:
    _, cache = model.forward(xt.xt, xt.t, cond)
    return model.backward(cache, cotangent, need_params=False)[1]


def grad_input(model: DenoiserModel, xt: NoisyState, cond: CondSpec, scalar_head: ScalarHead,
               sched: Optional[NoiseSchedule] = None, return_aux: bool = False):
    """Gradient of scalar_head(x0_hat(x_t)) w.r.t. x_t through eps_theta and predict_x0.

    With x0_hat = (x_t - s eps(x_t)) / a:  d/dx_t = (g - s J_x^T g) / a, g = head'(x0_hat).
    """
    sched = sched or model.schedule
    a, s = sched.coefficients(xt.t)
    eps, cache = model.forward(xt.xt, xt.t, cond)
    x0_hat = (xt.xt - s * eps) / a
    g = scalar_head.grad(x0_hat)
    jx = model.backward(cache, g, need_params=False)[1]
    grad = (g - s * jx) / a
    if return_aux:
        return grad, eps, x0_hat
    return grad


# --- optimisation ----------------------------------------------------------------
class Adam:
    """Adam on a flat float64 parameter array, updated in place"""

    def __init__(self, size: int, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.step_count += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.step_count)
        v_hat = self.v / (1 - self.b2 ** self.step_count)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _stack(data: Sequence[DataPoint]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.x0 for p in data])
    c = np.array([p.concept_id for p in data], dtype=np.int64)
    return x, c


def train_base(model: DenoiserModel, data: Sequence[DataPoint], opt_cfg, seed: int,
               on_log: Optional[Callable[[int, float], None]] = None, progress: bool = False) -> DenoiserModel:
    """Minibatch DSM with Adam and condition dropout; returns a trained copy"""
    if len(data) == 0:
        raise InvalidArgumentError("train_base: empty dataset")
    sched = model.schedule
    model = model.copy()
    x_all, c_all = _stack(data)
    if np.any(c_all < 0) or np.any(c_all >= model.arch.n_concepts):
        raise InvalidArgumentError("train_base: concept ids outside the model's concept range")
    rng = np.random.default_rng(seed)
    opt = Adam(model.n_base_params, opt_cfg.lr)
    batch = opt_cfg.batch_size
    steps = range(opt_cfg.steps)
    if progress:
        from tqdm import tqdm
        steps = tqdm(steps, desc="train", unit="step")
    running = []
    for it in steps:
        idx = rng.integers(0, len(data), size=batch)
        t = rng.integers(1, sched.T + 1, size=batch)
        eps = rng.standard_normal((batch, model.d_x))
        drop = rng.random(batch) < opt_cfg.p_uncond
        conds = [model.null_condition if d else (int(c),) for d, c in zip(drop, c_all[idx])]
        xt = forward_noise(x_all[idx], t, eps, sched)
        out, cache = model.forward(xt.xt, t, conds)
        residual = out - eps
        loss = float(np.mean(np.sum(residual * residual, axis=1)))
        if not np.isfinite(loss):
            raise TrainingFailureError("DSM loss became non-finite", iteration=it)
        g_theta = model.backward(cache, 2.0 * residual / batch, include_tokens=False)[0]
        opt.step(model.flat, g_theta)
        running.append(loss)
        if (it + 1) % opt_cfg.log_every == 0 or it + 1 == opt_cfg.steps:
            mean_loss = float(np.mean(running))
            running = []
            logger.info(f"train step {it + 1}/{opt_cfg.steps} dsm={mean_loss:.5f}")
            if on_log is not None:
                on_log(it + 1, mean_loss)
    return model


def _invert(model: DenoiserModel, xs: np.ndarray, exemplar_ids: List[int], opt_cfg, seed: int,
            context: Tuple[int, ...]) -> LearnedToken:
    if xs.shape[0] == 0:
        raise InvalidArgumentError("token inversion needs at least one exemplar")
    sched = model.schedule
    rng = np.random.default_rng(seed)
    init = rng.normal(0.0, opt_cfg.init_scale, size=model.arch.hidden)
    token_id = model.append_token(init)
    cond = tuple(context) + (token_id,)
    row = token_id - model.arch.n_base_rows
    opt = Adam(model.arch.hidden, opt_cfg.lr)
    batch = opt_cfg.batch_size
    for it in range(opt_cfg.steps):
        idx = rng.integers(0, xs.shape[0], size=batch)
        t = rng.integers(1, sched.T + 1, size=batch)
        eps = rng.standard_normal((batch, model.d_x))
        xt = forward_noise(xs[idx], t, eps, sched)
        out, cache = model.forward(xt.xt, t, cond)
        residual = out - eps
        loss = float(np.mean(np.sum(residual * residual, axis=1)))
        if not np.isfinite(loss):
            raise TrainingFailureError("token inversion loss became non-finite", iteration=it)
        g_rows = model.backward(cache, 2.0 * residual / batch, need_params=False)[2]
        # the token row appears once in every condition of the batch
        opt.step(model.tokens[row], g_rows.sum(axis=0))
    token = LearnedToken(model.tokens[row].copy(), token_id, list(exemplar_ids), tuple(context))
    model.token_meta.append(token)
    logger.info(f"learned token {token_id} from {xs.shape[0]} exemplar(s), context={tuple(context)}")
    return token


def invert_token(model: DenoiserModel, exemplars: Sequence[DataPoint], opt_cfg, seed: int,
                 context: Tuple[int, ...] = ()) -> LearnedToken:
    """Learn one cond_table row on exemplars with every base parameter frozen"""
    if len(exemplars) == 0:
        raise InvalidArgumentError("invert_token: exemplars must be non-empty")
    xs = np.stack([p.x0 for p in exemplars])
    return _invert(model, xs, [p.sample_id for p in exemplars], opt_cfg, seed, context)


def invert_local_token(model: DenoiserModel, generated: np.ndarray, opt_cfg, seed: int,
                       context: Tuple[int, ...] = ()) -> LearnedToken:
    """Token for the concept as it appears in a single (generated) image"""
    generated = np.asarray(generated, dtype=np.float64)
    if generated.ndim != 1 or generated.size != model.d_x:
        raise InvalidArgumentError("invert_local_token expects one flattened sample")
    return _invert(model, generated[None, :], [], opt_cfg, seed, context)


# --- checkpoints -------------------------------------------------------------------
def save_checkpoint(model: DenoiserModel, path: Union[str, Path], fingerprint: str) -> None:
    layers = model.flat[:model.arch.n_layer_params]
    meta = {
        "arch": model.arch.to_dict(),
        "fingerprint": fingerprint,
        "schedule_kind": model.schedule.kind.value if model.schedule else None,
        "tokens": [
            {"token_id": t.token_id, "exemplar_ids": list(t.exemplar_ids), "context": list(t.context)}
            for t in model.token_meta
        ],
    }
    arrays = {"theta": layers, "cond_table": model.cond_table}
    if model.schedule is not None:
        arrays["alpha_bar"] = model.schedule.alpha_bar
    write_container(path, CHECKPOINT_MAGIC, meta, arrays, version=CHECKPOINT_VERSION)


def load_checkpoint(path: Union[str, Path]) -> Tuple[DenoiserModel, dict]:
    version, meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {version}")
    arch = ArchSpec(**meta["arch"])
    table = arrays["cond_table"]
    flat = np.concatenate([arrays["theta"], table[:arch.n_base_rows].ravel()])
    schedule = None
    if "alpha_bar" in arrays:
        schedule = NoiseSchedule(arrays["alpha_bar"], ScheduleKind(meta.get("schedule_kind") or "custom"))
    tokens = table[arch.n_base_rows:]
    token_meta = [
        LearnedToken(tokens[t["token_id"] - arch.n_base_rows].copy(), t["token_id"], t["exemplar_ids"], tuple(t["context"]))
        for t in meta.get("tokens", [])
    ]
    return DenoiserModel(arch, flat, tokens, schedule, token_meta), meta
