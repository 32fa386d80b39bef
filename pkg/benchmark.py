"""
Synthetic glyph benchmark.

Concept = shape, nuisance = style. Token k withholds the cell (shape k, style
k mod S): that cell holds only `exemplars_per_concept` samples, the token is
learned on them in context (k,), and a query generated from (k, token) should
retrieve those exemplars. Also hosts the ablation ladder, the TRAK / D-TRAK
baselines, the exact leave-one-out oracle and local-vs-global attribution.
"""

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import stats
from tqdm import tqdm

from attribution_losses import (
    AggregatedGradient,
    ConceptTrio,
    RewardProvider,
    SliderReward,
    dps_train_gradient,
    dsm_train_gradient_baseline,
    dsm_utility_gradient,
    dtrak_gradient_baseline,
    dtrak_utility_gradient,
    reward_dps_utility_gradient,
)
from config import RunConfig, derive_seed
from diffusion_core import CFGGuidance, DataPoint, NoiseSchedule, check_unique_ids, ddim_sample, forward_noise, sampling_steps
from errors import FingerprintMismatchError, InvalidArgumentError, InvalidStateError, StorageError
from glyphs import GlyphOracle, GlyphSpec, catalog, render_glyph
from logs import get_logger
from projection_store import (
    GradientStore,
    InfluenceReport,
    ProjectedGradientRecord,
    ProjectedHessian,
    Projector,
    accumulate_fp,
    default_lambda,
    lambda_grid,
    project,
    score_influences,
    solve_regularized,
    store_append,
)
from scorenet import ArchSpec, DenoiserModel, LearnedToken, invert_local_token, invert_token, load_checkpoint, save_checkpoint, train_base

logger = get_logger(__name__)

PROGRESS_EVERY = 100


# --- dataset -------------------------------------------------------------------
@dataclass
class GlyphDataset:
    data: List[DataPoint]
    oracle: GlyphOracle
    exemplars: Dict[int, List[int]] = field(default_factory=dict)
    n_styles: int = 0

    def by_id(self) -> Dict[int, DataPoint]:
        return {p.sample_id: p for p in self.data}

    def exemplar_style(self, concept: int) -> int:
        return concept % self.n_styles


def generate_dataset(M: int, S: int, per_cell: int, seed: int, *, resolution: int = 16, jitter: bool = True,
                     max_shift: int = 1, intensity_jitter: float = 0.15,
                     cell_counts: Optional[Dict[Tuple[int, int], int]] = None) -> Tuple[List[DataPoint], GlyphOracle]:
    """Render M x S x per_cell glyphs (cell_counts overrides individual cells) plus the template oracle"""
    if M < 2 or S < 2:
        raise InvalidArgumentError("need at least two shapes and two styles")
    catalog(M, S)
    cell_counts = cell_counts or {}
    data, sid = [], 0
    for m in range(M):
        for s in range(S):
            for _ in range(cell_counts.get((m, s), per_cell)):
                spec = GlyphSpec(m, s, derive_seed(seed, f"glyph:{sid}"), resolution)
                x0 = render_glyph(spec, jitter, max_shift, intensity_jitter)
                data.append(DataPoint(x0, m, s, sid))
                sid += 1
    return data, GlyphOracle(M, S, resolution, max_shift)


def build_dataset(cfg, seed: int) -> GlyphDataset:
    """Benchmark dataset; concepts below n_exemplar_concepts get a withheld exemplar cell"""
    n_tok = min(cfg.n_exemplar_concepts, cfg.n_shapes)
    withheld = {(k, k % cfg.n_styles): cfg.exemplars_per_concept for k in range(n_tok)}
    data, oracle = generate_dataset(cfg.n_shapes, cfg.n_styles, cfg.per_cell, seed, resolution=cfg.resolution,
                                    jitter=cfg.jitter, max_shift=cfg.max_shift,
                                    intensity_jitter=cfg.intensity_jitter, cell_counts=withheld)
    exemplars = {k: [p.sample_id for p in data if p.concept_id == k and p.style_id == k % cfg.n_styles]
                 for k in range(n_tok)}
    logger.info(f"dataset: {len(data)} glyphs, {cfg.n_shapes} shapes x {cfg.n_styles} styles, {n_tok} exemplar cells")
    return GlyphDataset(data, oracle, exemplars, cfg.n_styles)


# --- model ---------------------------------------------------------------------
def build_model(cfg: RunConfig, n_concepts: Optional[int] = None, resolution: Optional[int] = None) -> DenoiserModel:
    res = resolution or cfg.dataset.resolution
    arch = ArchSpec(res * res, n_concepts or cfg.dataset.n_shapes, cfg.model.hidden, cfg.model.n_hidden_layers,
                    cfg.model.time_dim, cfg.model.activation)
    return DenoiserModel.init(arch, cfg.seed_for("init"), NoiseSchedule.from_config(cfg.schedule))


def train_model(cfg: RunConfig, data: Sequence[DataPoint], seed: Optional[int] = None, progress: bool = False,
                n_concepts: Optional[int] = None, resolution: Optional[int] = None,
                training=None) -> Tuple[DenoiserModel, List[Tuple[int, float]]]:
    curve: List[Tuple[int, float]] = []
    model = build_model(cfg, n_concepts, resolution)
    seed = cfg.seed_for("train") if seed is None else seed
    trained = train_base(model, data, training or cfg.training, seed, on_log=lambda s, l: curve.append((s, l)),
                         progress=progress)
    return trained, curve


def write_training_curve(curve: Sequence[Tuple[int, float]], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "dsm_loss"])
        for step, loss in curve:
            writer.writerow([step, repr(loss)])


def ensure_checkpoint(cfg: RunConfig, data: Sequence[DataPoint], out_dir: Path, progress: bool = False) -> DenoiserModel:
    """Load out_dir/checkpoint.ctrk when its fingerprint matches, otherwise train and write it"""
    path = out_dir / "checkpoint.ctrk"
    expected = cfg.checkpoint_fingerprint()
    if path.exists():
        model, meta = load_checkpoint(path)
        if meta.get("fingerprint") == expected:
            logger.info(f"reusing {path}")
            return model
        logger.info(f"{path} was trained under fingerprint {meta.get('fingerprint')}; retraining")
    model, curve = train_model(cfg, data, progress=progress)
    save_checkpoint(model, path, expected)
    write_training_curve(curve, out_dir / "training_curve.csv")
    return model


def load_matching_checkpoint(cfg: RunConfig, path: Path) -> DenoiserModel:
    model, meta = load_checkpoint(path)
    if meta.get("fingerprint") != cfg.checkpoint_fingerprint():
        raise FingerprintMismatchError(str(path), cfg.checkpoint_fingerprint(), meta.get("fingerprint"))
    return model


# --- ablation configs --------------------------------------------------------------
@dataclass(frozen=True)
class AblationConfig:
    id: str
    train_loss: Literal["dsm", "dps", "dtrak"]
    utility_loss: Literal["dsm", "reward-dps", "dtrak"]
    use_ddim_inversion: bool
    normalize: bool
    lambda_policy: Literal["auto", "sweep"] = "auto"

    @property
    def store_key(self) -> str:
        key = self.train_loss
        if self.train_loss == "dps" and self.use_ddim_inversion:
            key += "-inv"
        return key + ("-norm" if self.normalize else "")

    @property
    def utility_key(self) -> str:
        return self.utility_loss + ("-norm" if self.normalize else "")

    @property
    def gradient_overrides(self) -> Dict[str, object]:
        """gradients fields this rung replaces; the store fingerprint is taken over them"""
        return {"train_loss": self.train_loss, "use_ddim_inversion": self.use_ddim_inversion, "normalize": self.normalize}


BASE = AblationConfig("Base", "dsm", "dsm", False, False)
ABL_A = AblationConfig("A", "dsm", "reward-dps", False, False)
ABL_B = AblationConfig("B", "dps", "reward-dps", False, False)
ABL_C = AblationConfig("C", "dps", "reward-dps", True, False)
ABL_D = AblationConfig("D", "dps", "reward-dps", True, True)
TRAK = AblationConfig("TRAK", "dsm", "dsm", False, False, "sweep")
DTRAK = AblationConfig("D-TRAK", "dtrak", "dtrak", False, False, "sweep")

ABLATION_LADDER = (BASE, ABL_A, ABL_B, ABL_C, ABL_D)
ABLATIONS = {c.id: c for c in ABLATION_LADDER + (TRAK, DTRAK)}


def from_gradients_config(cfg: RunConfig, id: str = "config") -> AblationConfig:
    g = cfg.gradients
    return AblationConfig(id, g.train_loss, g.utility_loss, g.use_ddim_inversion, g.normalize)


# --- training-gradient stores --------------------------------------------------------
@dataclass(frozen=True)
class GradientSettings:
    train_loss: str
    use_ddim_inversion: bool
    normalize: bool
    n_timesteps: int
    w: float
    sigma_scaling: bool
    ddim_steps: int
    seed: int

    @classmethod
    def from_config(cls, cfg: RunConfig, ablation: Optional[AblationConfig] = None) -> "GradientSettings":
        ablation = ablation or from_gradients_config(cfg)
        g = cfg.gradients
        return cls(ablation.train_loss, ablation.use_ddim_inversion, ablation.normalize, g.n_timesteps, g.w,
                   g.sigma_scaling, cfg.schedule.ddim_steps, cfg.seed_for("train-grads"))


def training_gradient(model: DenoiserModel, point: DataPoint, settings: GradientSettings) -> AggregatedGradient:
    cond = (point.concept_id,)
    seed = (settings.seed, point.sample_id)
    source = f"sample:{point.sample_id}"
    if settings.train_loss == "dps":
        return dps_train_gradient(model, point.x0, cond, settings.n_timesteps, w=settings.w,
                                  sigma_scaling=settings.sigma_scaling, use_ddim_inversion=settings.use_ddim_inversion,
                                  normalize=settings.normalize, ddim_steps=settings.ddim_steps, seed=seed, source=source)
    if settings.train_loss == "dtrak":
        return dtrak_gradient_baseline(model, point.x0, cond, settings.n_timesteps, seed, settings.normalize, source)
    return dsm_train_gradient_baseline(model, point.x0, cond, settings.n_timesteps, seed, settings.normalize, source)


_WORKER: dict = {}


def _init_worker(model: DenoiserModel, settings: GradientSettings, projector: Projector) -> None:
    _WORKER.update(model=model, settings=settings, projector=projector)


def _worker_record(point: DataPoint) -> ProjectedGradientRecord:
    agg = training_gradient(_WORKER["model"], point, _WORKER["settings"])
    g_proj = project(_WORKER["projector"], agg.g)
    return ProjectedGradientRecord(point.sample_id, g_proj, agg.norm, agg.loss_kind, agg.n_timesteps)


def build_gradient_store(model: DenoiserModel, data: Sequence[DataPoint], settings: GradientSettings,
                         projector: Projector, path: Path, fingerprint: str, jobs: int = 1,
                         progress: bool = False) -> GradientStore:
    """Per-sample training gradients, projected and appended in data order by a single writer"""
    check_unique_ids(data)
    if projector.d != model.n_base_params:
        raise InvalidArgumentError(f"projector dimension {projector.d} != model parameters {model.n_base_params}")
    store = GradientStore.create(path, projector.k, projector.seed, fingerprint)
    started = time.perf_counter()
    with store:
        if jobs > 1:
            pool = ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model, settings, projector))
            results: Iterable[ProjectedGradientRecord] = pool.map(_worker_record, data, chunksize=4)
        else:
            pool = None
            _init_worker(model, settings, projector)
            results = map(_worker_record, data)
        try:
            for i, rec in enumerate(tqdm(results, total=len(data), desc=Path(path).name, disable=not progress), 1):
                store_append(store, rec)
                if i % PROGRESS_EVERY == 0 or i == len(data):
                    elapsed = time.perf_counter() - started
                    logger.info(f"{Path(path).name}: {i}/{len(data)} samples, {i / max(elapsed, 1e-9):.2f} samples/s")
        finally:
            if pool is not None:
                pool.shutdown()
    return GradientStore.open(path)


def hessian_for(store: GradientStore, path: Optional[Path] = None) -> ProjectedHessian:
    """Load the cached Hessian at path when it matches the store, else accumulate (and save)"""
    if path is not None and path.exists():
        try:
            h = ProjectedHessian.load(path)
            if h.fingerprint == store.fingerprint and h.count == len(store):
                return h
        except StorageError as e:
            logger.warning(f"ignoring unreadable {path}: {e}")
    h = accumulate_fp(store)
    h.lam = default_lambda(h)
    if path is not None:
        h.save(path)
    return h


# --- retrieval protocol -----------------------------------------------------------------
@dataclass
class Query:
    token_index: int
    query_index: int
    concept: int
    xT: np.ndarray
    image: np.ndarray
    trio: ConceptTrio
    exemplar_ids: Tuple[int, ...]


@dataclass
class BenchmarkRun:
    exemplar_concepts: List[int]
    tokens: List[LearnedToken]
    generations_per_token: int
    pool_size: int
    recall_at: List[int]
    config: str
    run_config: RunConfig
    model: DenoiserModel
    dataset: GlyphDataset
    queries: List[Query]
    out_dir: Optional[Path] = None
    jobs: int = 1
    progress: bool = False
    _stores: Dict[str, Tuple[GradientStore, ProjectedHessian]] = field(default_factory=dict, repr=False)
    _utilities: Dict[Tuple[str, int, int], np.ndarray] = field(default_factory=dict, repr=False)
    pool_ids: Optional[Set[int]] = None

    @property
    def projector(self) -> Projector:
        return Projector.from_config(self.run_config.projector, self.model.n_base_params)

    def pool(self) -> List[DataPoint]:
        if self.pool_ids is None:
            return self.dataset.data
        return [p for p in self.dataset.data if p.sample_id in self.pool_ids]

    def store_for(self, ablation: AblationConfig) -> Tuple[GradientStore, ProjectedHessian]:
        key = ablation.store_key
        if key not in self._stores:
            fp = self.run_config.projection_fingerprint(**ablation.gradient_overrides)
            settings = GradientSettings.from_config(self.run_config, ablation)
            if self.out_dir is None:
                raise InvalidStateError("benchmark run has no output directory for its gradient stores")
            path = self.out_dir / f"grads-{key}.ctgs"
            store = _reuse_store(path, fp, len(self.pool()))
            if store is None:
                store = build_gradient_store(self.model, self.pool(), settings, self.projector, path, fp,
                                             self.jobs, self.progress)
            self._stores[key] = (store, hessian_for(store, self.out_dir / f"hessian-{key}.cthp"))
        return self._stores[key]

    def utility(self, query: Query, ablation: AblationConfig) -> np.ndarray:
        key = (ablation.utility_key, query.token_index, query.query_index)
        if key not in self._utilities:
            agg = query_utility_gradient(self.model, query, ablation, self.run_config)
            self._utilities[key] = project(self.projector, agg.g)
        return self._utilities[key]


def _reuse_store(path: Path, fingerprint: str, count: int) -> Optional[GradientStore]:
    if not path.exists():
        return None
    try:
        store = GradientStore.open(path)
    except StorageError as e:
        logger.warning(f"rebuilding {path.name}: {e}")
        return None
    if store.fingerprint != fingerprint or len(store) != count:
        return None
    logger.info(f"reusing {path.name} ({count} records)")
    return store


def query_utility_gradient(model: DenoiserModel, query: Query, ablation: AblationConfig, cfg: RunConfig) -> AggregatedGradient:
    g = cfg.gradients
    seed = (cfg.seed_for("utility"), query.concept, query.query_index)
    if ablation.utility_loss == "reward-dps":
        return reward_dps_utility_gradient(model, SliderReward(query.trio), g.n_trajectories, g.utility_timesteps,
                                           seed=seed, normalize=ablation.normalize, cfg_scale=g.cfg_scale,
                                           sampling_steps=cfg.benchmark.sampling_steps, first_latent=query.xT)
    if ablation.utility_loss == "dtrak":
        return dtrak_utility_gradient(model, query.image, query.trio.c_pos, g.utility_timesteps, seed, ablation.normalize)
    return dsm_utility_gradient(model, query.image, query.trio.c_pos, g.utility_timesteps, seed, ablation.normalize)


def generate(model: DenoiserModel, cond, xT: np.ndarray, n_steps: int, cfg_scale: float = 1.0) -> np.ndarray:
    guidance = CFGGuidance(cfg_scale) if cfg_scale > 0 else None
    return ddim_sample(model, cond, xT, sampling_steps(model.schedule, n_steps), guidance)[-1].xt


def prepare_run(cfg: RunConfig, out_dir: Optional[Path] = None, jobs: int = 1, progress: bool = False,
                model: Optional[DenoiserModel] = None, dataset: Optional[GlyphDataset] = None) -> BenchmarkRun:
    """Dataset, base model, one learned token per exemplar concept and its query generations"""
    dataset = dataset or build_dataset(cfg.dataset, cfg.seed_for("dataset"))
    if model is None:
        if out_dir is None:
            model, _ = train_model(cfg, dataset.data, progress=progress)
        else:
            model = ensure_checkpoint(cfg, dataset.data, out_dir, progress)
    model = model.copy()
    concepts = sorted(dataset.exemplars)[:cfg.benchmark.n_tokens]
    if not concepts:
        raise InvalidStateError("dataset has no exemplar concepts to learn tokens for")
    by_id = dataset.by_id()
    tokens, queries = [], []
    for ti, k in enumerate(tqdm(concepts, desc="tokens", disable=not progress)):
        exemplars = [by_id[i] for i in dataset.exemplars[k]]
        token = invert_token(model, exemplars, cfg.inversion, cfg.seed_for(f"token:{k}"), context=(k,))
        tokens.append(token)
        trio = ConceptTrio(c_base=token.condition, c_pos=token.condition, c_neg=(k,), beta_inv=cfg.gradients.beta_inv)
        for q in range(cfg.benchmark.generations_per_token):
            xT = np.random.default_rng((cfg.seed_for("queries"), k, q)).standard_normal(model.d_x)
            image = generate(model, token.condition, xT, cfg.benchmark.sampling_steps, cfg.gradients.cfg_scale)
            queries.append(Query(ti, q, k, xT, image, trio, tuple(dataset.exemplars[k])))
    return BenchmarkRun(concepts, tokens, cfg.benchmark.generations_per_token, len(dataset.data),
                        list(cfg.benchmark.recall_at), cfg.fingerprint(), cfg, model, dataset, queries,
                        out_dir, jobs, progress)


@dataclass
class RecallRow:
    token: int
    query_index: int
    flags: Dict[int, bool]
    top10: List[int]


@dataclass
class RecallTable:
    ablation: AblationConfig
    rows: List[RecallRow]
    recall: Dict[int, float]
    lambda_used: float
    default_lambda: float
    runtime_s: float = 0.0
    sweep: Dict[float, float] = field(default_factory=dict)

    def write_csv(self, path: Path) -> None:
        js = sorted(self.recall)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["token", "query_index"] + [f"recall@{j}" for j in js] + ["top10"])
            for r in self.rows:
                writer.writerow([r.token, r.query_index] + [int(r.flags[j]) for j in js] + [" ".join(map(str, r.top10))])


def recall_flags(ranked_ids: Sequence[int], exemplar_ids: Iterable[int], recall_at: Sequence[int]) -> Dict[int, bool]:
    """Recall@j succeeds when any exemplar appears in the first j ranked ids"""
    targets = set(exemplar_ids)
    first_hit = next((i for i, sid in enumerate(ranked_ids) if sid in targets), None)
    return {int(j): first_hit is not None and first_hit < j for j in recall_at}


def _rank_all(ids: np.ndarray, G: np.ndarray, F: np.ndarray, lam: float, U: np.ndarray, depth: int) -> np.ndarray:
    """Top-`depth` ids per query column, ties by ascending sample_id"""
    Y = solve_regularized(F, lam, U.T)
    S = G @ Y
    out = np.empty((U.shape[0], min(depth, ids.size)), dtype=np.int64)
    for q in range(U.shape[0]):
        out[q] = ids[np.lexsort((ids, -S[:, q]))[:out.shape[1]]]
    return out


def run_abc(run: BenchmarkRun, cfg: AblationConfig) -> RecallTable:
    """Recall@j of the exemplars for every query under one ablation config"""
    if not run.queries:
        raise InvalidStateError("benchmark run has no queries")
    started = time.perf_counter()
    store, h = run.store_for(cfg)
    ids_parts, g_parts = zip(*store.iter_blocks())
    ids, G = np.concatenate(ids_parts), np.concatenate(g_parts)
    U = np.stack([run.utility(q, cfg) for q in tqdm(run.queries, desc=f"utility {cfg.id}", disable=not run.progress)])
    depth = max(max(run.recall_at), 10)
    lam_star = default_lambda(h)
    att = run.run_config.attribution
    grid = lambda_grid(lam_star, att.sweep_points, att.sweep_decades) if cfg.lambda_policy == "sweep" else [lam_star]
    primary = 10 if 10 in run.recall_at else max(run.recall_at)
    best = None
    sweep = {}
    for lam in grid:
        ranked = _rank_all(ids, G, h.F, lam, U, depth)
        rows = [RecallRow(q.token_index, q.query_index, recall_flags(ranked[i], q.exemplar_ids, run.recall_at),
                          [int(s) for s in ranked[i][:10]]) for i, q in enumerate(run.queries)]
        recall = {j: float(np.mean([r.flags[j] for r in rows])) for j in run.recall_at}
        sweep[lam] = recall[primary]
        if best is None or recall[primary] > best[2][primary]:
            best = (lam, rows, recall)
    lam, rows, recall = best
    table = RecallTable(cfg, rows, recall, lam, lam_star, time.perf_counter() - started, sweep)
    logger.info(f"{cfg.id}: " + ", ".join(f"Recall@{j}={v:.3f}" for j, v in sorted(recall.items())) + f" (lambda={lam:.3g})")
    return table


# --- summary ------------------------------------------------------------------------
class ConfigResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    train_loss: str
    utility_loss: str
    use_ddim_inversion: bool
    normalize: bool
    lambda_policy: str
    lambda_used: float
    default_lambda: float
    recall: Dict[str, float]
    n_queries: int
    runtime_s: float


class BenchmarkSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = 1
    fingerprint: str
    checkpoint_fingerprint: str
    n_tokens: int
    generations_per_token: int
    pool_size: int
    recall_at: List[int]
    configs: List[ConfigResult]


def summarize(run: BenchmarkRun, tables: Sequence[RecallTable]) -> BenchmarkSummary:
    return BenchmarkSummary(
        fingerprint=run.config,
        checkpoint_fingerprint=run.run_config.checkpoint_fingerprint(),
        n_tokens=len(run.tokens),
        generations_per_token=run.generations_per_token,
        pool_size=len(run.pool()),
        recall_at=run.recall_at,
        configs=[
            ConfigResult(id=t.ablation.id, train_loss=t.ablation.train_loss, utility_loss=t.ablation.utility_loss,
                         use_ddim_inversion=t.ablation.use_ddim_inversion, normalize=t.ablation.normalize,
                         lambda_policy=t.ablation.lambda_policy, lambda_used=t.lambda_used,
                         default_lambda=t.default_lambda, recall={f"recall@{j}": v for j, v in sorted(t.recall.items())},
                         n_queries=len(t.rows), runtime_s=round(t.runtime_s, 3))
            for t in tables
        ],
    )


def write_ablation_chart(summary: BenchmarkSummary, path: Path, j: int = 10) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    key = f"recall@{j}"
    names = [c.id for c in summary.configs]
    values = [c.recall.get(key, 0.0) for c in summary.configs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, values, color="#4c72b0")
    ax.set_ylim(0, 1)
    ax.set_ylabel(f"Recall@{j}")
    ax.set_title("Exemplar retrieval by configuration")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def run_benchmark(run: BenchmarkRun, ablations: Sequence[AblationConfig], chart: bool = True) -> BenchmarkSummary:
    """Run each config, writing benchmark-<id>.csv, summary.json and ablation.svg into run.out_dir"""
    from containers import atomic_write

    tables = []
    for ablation in ablations:
        table = run_abc(run, ablation)
        tables.append(table)
        if run.out_dir is not None:
            table.write_csv(run.out_dir / f"benchmark-{ablation.id}.csv")
    summary = summarize(run, tables)
    if run.out_dir is not None:
        atomic_write(run.out_dir / "summary.json", summary.model_dump_json(indent=2).encode("utf-8"))
        if chart:
            write_ablation_chart(summary, run.out_dir / "ablation.svg", 10 if 10 in run.recall_at else max(run.recall_at))
    return summary


# --- leave-one-out oracle --------------------------------------------------------------
@dataclass
class LooOracleResult:
    removed_sample_id: int
    delta_utility: float
    rank_by_influence: Optional[int] = None
    removed_group: Tuple[int, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.delta_utility):
            raise InvalidArgumentError(f"non-finite oracle delta for sample {self.removed_sample_id}")


def slider_reward_values(model: DenoiserModel, xs: np.ndarray, concept: int, ts: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Implicit concept reward per image: mean over fixed draws of ||eps - eps(null)||^2 - ||eps - eps(concept)||^2"""
    xs = np.atleast_2d(xs)
    total = np.zeros(xs.shape[0])
    for t, e in zip(ts, eps):
        noise = np.broadcast_to(e, xs.shape)
        xt = forward_noise(xs, int(t), noise, model.schedule).xt
        r_neg = noise - model.eps(xt, int(t), model.null_condition)
        r_pos = noise - model.eps(xt, int(t), (concept,))
        total += np.sum(r_neg * r_neg, axis=1) - np.sum(r_pos * r_pos, axis=1)
    return total / len(ts)


def concept_utility(model: DenoiserModel, concept: int, cfg: RunConfig, seed: int) -> float:
    """Mean slider reward of the concept's guided generations; latents and draws depend only on seed"""
    o = cfg.oracle
    rng = np.random.default_rng(seed)
    xT = rng.standard_normal((o.n_generations, model.d_x))
    ts = rng.integers(1, model.schedule.T + 1, size=o.reward_draws)
    eps = rng.standard_normal((o.reward_draws, model.d_x))
    images = generate(model, (concept,), xT, cfg.benchmark.sampling_steps, cfg.gradients.cfg_scale)
    return float(np.mean(slider_reward_values(model, images, concept, ts, eps)))


def oracle_dataset(cfg: RunConfig) -> GlyphDataset:
    o = cfg.oracle
    per_cell = max(1, o.n_train // (o.n_shapes * o.n_styles))
    data, oracle = generate_dataset(o.n_shapes, o.n_styles, per_cell, cfg.seed_for("oracle-dataset"),
                                    resolution=cfg.dataset.resolution, jitter=cfg.dataset.jitter,
                                    max_shift=cfg.dataset.max_shift, intensity_jitter=cfg.dataset.intensity_jitter)
    return GlyphDataset(data, oracle, {}, o.n_styles)


def _oracle_training(cfg: RunConfig):
    return cfg.training.model_copy(update={"steps": cfg.oracle.training_steps})


def _n_concepts(data: Sequence[DataPoint]) -> int:
    return max(p.concept_id for p in data) + 1


def _oracle_utility(args) -> float:
    cfg, data, concept, train_seed, utility_seed = args
    model, _ = train_model(cfg, data, seed=train_seed, n_concepts=cfg.oracle.n_shapes, training=_oracle_training(cfg))
    return concept_utility(model, concept, cfg, utility_seed)


def _check_oracle_size(cfg: RunConfig, data: Sequence[DataPoint]) -> None:
    if len(data) > cfg.oracle.max_samples:
        raise InvalidStateError(f"exact retraining needs N <= {cfg.oracle.max_samples}, got {len(data)} samples; "
                                f"shrink oracle.n_train")
    if _n_concepts(data) > cfg.oracle.n_shapes:
        raise InvalidArgumentError("oracle data uses more concepts than oracle.n_shapes")


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def loo_oracle(cfg: RunConfig, data: Sequence[DataPoint], removed_ids: Sequence[Union[int, Sequence[int]]],
               concept: int, seed: int, jobs: int = 1,
               influence: Optional[Dict[int, float]] = None) -> List[LooOracleResult]:
    """delta = u(full) - u(without group), retraining from the same seed each time"""
    _check_oracle_size(cfg, data)
    groups = [tuple(r) if isinstance(r, (list, tuple)) else (int(r),) for r in removed_ids]
    known = {p.sample_id for p in data}
    for g in groups:
        if not set(g) <= known:
            raise InvalidArgumentError(f"removed ids {sorted(set(g) - known)} are not in the dataset")
    train_seed, utility_seed = derive_seed(seed, "oracle-train"), derive_seed(seed, "oracle-utility")
    jobs_args = [(cfg, list(data), concept, train_seed, utility_seed)]
    jobs_args += [(cfg, [p for p in data if p.sample_id not in set(g)], concept, train_seed, utility_seed) for g in groups]
    utilities = _map(_oracle_utility, jobs_args, jobs)
    u_full = utilities[0]
    ranks = {}
    if influence:
        ranked = sorted(influence.items(), key=lambda kv: (-kv[1], kv[0]))
        ranks = {sid: r for r, (sid, _) in enumerate(ranked, start=1)}
    results = [LooOracleResult(g[0], u_full - u, ranks.get(g[0]) if len(g) == 1 else None, g)
               for g, u in zip(groups, utilities[1:])]
    logger.info(f"oracle: u(full)={u_full:.5f}, {len(results)} retrainings")
    return results


def loo_noise_floor(cfg: RunConfig, data: Sequence[DataPoint], concept: int, seed: int, replicates: int = 5,
                    jobs: int = 1) -> float:
    """Std of the full-data utility across replicate training seeds"""
    _check_oracle_size(cfg, data)
    if replicates < 2:
        raise InvalidArgumentError("noise floor needs at least two replicates")
    utility_seed = derive_seed(seed, "oracle-utility")
    args = [(cfg, list(data), concept, derive_seed(seed, f"replicate:{r}"), utility_seed) for r in range(replicates)]
    return float(np.std(_map(_oracle_utility, args, jobs), ddof=1))


def loo_agreement(results: Sequence[LooOracleResult], influence: Dict[int, float], matched_ids: Set[int]) -> Dict[str, float]:
    """Spearman rho between influence and oracle deltas, and a one-sided Mann-Whitney U
    test that concept-matched deltas exceed unmatched ones"""
    singles = [r for r in results if len(r.removed_group) <= 1]
    deltas = np.array([r.delta_utility for r in singles])
    scores = np.array([influence[r.removed_sample_id] for r in singles])
    out = {"n": float(len(singles))}
    if len(singles) >= 3:
        rho, p = stats.spearmanr(scores, deltas)
        out.update(spearman_rho=float(rho), spearman_p=float(p))
    matched = [r.delta_utility for r in singles if r.removed_sample_id in matched_ids]
    unmatched = [r.delta_utility for r in singles if r.removed_sample_id not in matched_ids]
    if matched and unmatched:
        u, p = stats.mannwhitneyu(matched, unmatched, alternative="greater")
        out.update(mannwhitney_u=float(u), mannwhitney_p=float(p))
    return out


# --- global and local attribution ---------------------------------------------------------
def _lambda(cfg: RunConfig, h: ProjectedHessian) -> Tuple[float, str]:
    att = cfg.attribution
    if att.lambda_policy == "fixed":
        return float(att.lambda_value), "fixed"
    return default_lambda(h), "auto"


def trio_utility_gradient(model: DenoiserModel, trio: ConceptTrio, cfg: RunConfig, seed,
                          provider: Optional[RewardProvider] = None) -> AggregatedGradient:
    """Utility gradient under cfg.gradients.utility_loss; reward-dps uses the slider unless a provider is given"""
    g = cfg.gradients
    if g.utility_loss == "reward-dps":
        return reward_dps_utility_gradient(model, provider or SliderReward(trio), g.n_trajectories, g.utility_timesteps,
                                           seed=seed, normalize=g.normalize, cfg_scale=g.cfg_scale,
                                           sampling_steps=cfg.benchmark.sampling_steps)
    # baseline utilities score the concept's own generations
    rng = np.random.default_rng(seed)
    images = np.stack([generate(model, trio.c_pos, rng.standard_normal(model.d_x), cfg.benchmark.sampling_steps,
                                g.cfg_scale) for _ in range(g.n_trajectories)])
    fn = dsm_utility_gradient if g.utility_loss == "dsm" else dtrak_utility_gradient
    agg = fn(model, images, trio.c_pos, g.utility_timesteps, seed, g.normalize)
    agg.source = f"{agg.source} {trio.describe()}"
    return agg


def _score_trio(model: DenoiserModel, trio: ConceptTrio, store: GradientStore, h: ProjectedHessian, cfg: RunConfig,
                seed, scope: str, descriptor: str) -> InfluenceReport:
    agg = trio_utility_gradient(model, trio, cfg, seed)
    util = project(Projector.from_config(cfg.projector, model.n_base_params), agg.g)
    lam, policy = _lambda(cfg, h)
    report = score_influences(store, h, util, lam, cfg.attribution.top_k, descriptor, lambda_policy=policy, scope=scope)
    report.metadata.update(degenerate=agg.degenerate, n_timesteps=agg.n_timesteps)
    return report


def run_global_attribution(model: DenoiserModel, concept: int, store: GradientStore, h: ProjectedHessian,
                           cfg: RunConfig, seed) -> InfluenceReport:
    trio = ConceptTrio((concept,), (concept,), model.null_condition, cfg.gradients.beta_inv)
    return _score_trio(model, trio, store, h, cfg, seed, "global", f"global:{trio.describe()}")


def run_local_attribution(model: DenoiserModel, generated: np.ndarray, store: GradientStore, h: ProjectedHessian,
                          cfg: RunConfig, seed: int, context: Tuple[int, ...] = ()) -> InfluenceReport:
    """Invert a token on one generated image, then attribute token-vs-context over the store"""
    local = model.copy()
    token = invert_local_token(local, generated, cfg.inversion, derive_seed(seed, "local-token"), context)
    neg = tuple(context) if context else local.null_condition
    trio = ConceptTrio(token.condition, token.condition, neg, cfg.gradients.beta_inv)
    return _score_trio(local, trio, store, h, cfg, seed, "local", f"local:{trio.describe()}")


def style_concentration(report: InfluenceReport, by_id: Dict[int, DataPoint], style_id: int, k: int = 10) -> float:
    """Fraction of the report's top-k sharing style_id"""
    top = report.ranked()[:k]
    if not top:
        return 0.0
    return float(np.mean([by_id[sid].style_id == style_id for sid, _ in top]))
