"""
ctrak command line: train -> grads -> utility -> attribute, plus benchmark,
ablate and oracle. Every CtrakError maps to its exit code.
"""

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import click

import benchmark as bench
from attribution_losses import (
    ConceptTrio,
    ExternalReward,
    SquaredDistanceReward,
    TemplateReward,
)
from config import RunConfig, derive_seed, load_config, resolve_output_dir
from containers import atomic_write, canonical_json
from errors import ConfigError, CtrakError, FingerprintMismatchError, InvalidStateError
from glyphs import SHAPE_NAMES, template
from logs import configure_logging, get_logger
from projection_store import (
    GradientStore,
    Projector,
    UtilityGradient,
    default_lambda,
    lambda_grid,
    lambda_sweep,
    score_influences,
)
from scorenet import save_checkpoint

logger = get_logger(__name__)

DEFAULT_CONFIG = "configs/default.toml"


@dataclass
class CliState:
    config_path: str
    jobs: int
    out: Optional[str]
    seed_override: Optional[int]
    _config: Optional[RunConfig] = None

    @property
    def config(self) -> RunConfig:
        if self._config is None:
            cfg = load_config(self.config_path)
            if self.seed_override is not None:
                cfg = cfg.with_seed(self.seed_override)
            self._config = cfg
        return self._config

    @property
    def out_dir(self) -> Path:
        return resolve_output_dir(self.out, self.config)

    @property
    def progress(self) -> bool:
        return sys.stderr.isatty()


class CtrakGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CtrakError as e:
            logger.error(str(e))
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)


@click.group(cls=CtrakGroup)
@click.option("--config", "config_path", default=DEFAULT_CONFIG, show_default=True, help="TOML run configuration")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1), help="worker processes")
@click.option("--out", default=None, help="output directory (falls back to CTRAK_OUT_DIR)")
@click.option("--seed-override", type=click.IntRange(min=0), default=None, help="replace the config's root seed")
@click.pass_context
def cli(ctx, config_path, jobs, out, seed_override):
    """Concept-level training data attribution for toy diffusion models"""
    configure_logging()
    ctx.obj = CliState(config_path, jobs, out, seed_override)


def _checkpoint(state: CliState, path: Optional[str]):
    path = Path(path) if path else state.out_dir / "checkpoint.ctrk"
    if not path.exists():
        raise InvalidStateError(f"checkpoint {path} not found; run `ctrak train` first")
    return bench.load_matching_checkpoint(state.config, path)


@cli.command()
@click.pass_obj
def train(state: CliState):
    """Train the base model; writes checkpoint.ctrk and training_curve.csv"""
    cfg, out = state.config, state.out_dir
    dataset = bench.build_dataset(cfg.dataset, cfg.seed_for("dataset"))
    model, curve = bench.train_model(cfg, dataset.data, progress=state.progress)
    save_checkpoint(model, out / "checkpoint.ctrk", cfg.checkpoint_fingerprint())
    bench.write_training_curve(curve, out / "training_curve.csv")
    final = f"{curve[-1][1]:.5f}" if curve else "n/a"
    click.echo(f"✅ checkpoint written to {out / 'checkpoint.ctrk'} (final DSM loss {final})")


@cli.command()
@click.option("--checkpoint", default=None, help="checkpoint path (default <out>/checkpoint.ctrk)")
@click.pass_obj
def grads(state: CliState, checkpoint):
    """Project per-sample training gradients into grads-<loss>.ctgs"""
    cfg, out = state.config, state.out_dir
    model = _checkpoint(state, checkpoint)
    dataset = bench.build_dataset(cfg.dataset, cfg.seed_for("dataset"))
    ablation = bench.from_gradients_config(cfg)
    settings = bench.GradientSettings.from_config(cfg, ablation)
    projector = Projector.from_config(cfg.projector, model.n_base_params)
    path = out / f"grads-{cfg.gradients.train_loss}.ctgs"
    store = bench.build_gradient_store(model, dataset.data, settings, projector, path,
                                       cfg.projection_fingerprint(), state.jobs, state.progress)
    h = bench.hessian_for(store, out / f"hessian-{cfg.gradients.train_loss}.cthp")
    click.echo(f"✅ {len(store)} records in {path} (k={store.k}, lambda*={default_lambda(h):.4g})")


def _resolve_concept(name: str, n_concepts: int, null_id: int) -> Tuple[int, ...]:
    """Shape name, integer id, 'null', or '+'-joined combination"""
    rows = []
    for part in name.split("+"):
        part = part.strip()
        if part == "null":
            rows.append(null_id)
        elif part.isdigit() and int(part) < n_concepts:
            rows.append(int(part))
        elif part in SHAPE_NAMES[:n_concepts]:
            rows.append(SHAPE_NAMES.index(part))
        else:
            known = ", ".join(SHAPE_NAMES[:n_concepts])
            raise ConfigError(f"unknown concept '{part}'; known concepts: {known}, null")
    return tuple(rows)


def _reward_from_spec(spec: str, cond: Tuple[int, ...], beta_inv: float, resolution: int, dataset) -> ExternalReward:
    kind, _, arg = spec.partition(":")
    if kind == "template":
        shape, _, style = arg.partition("/")
        shape_id = _resolve_concept(shape, len(SHAPE_NAMES), -1)[0]
        fn = TemplateReward(template(shape_id, int(style or 0), resolution).ravel(), name=arg)
    elif kind == "reference":
        by_id = dataset.by_id()
        if not arg.isdigit() or int(arg) not in by_id:
            raise ConfigError(f"reference reward needs a training sample id, got '{arg}'")
        fn = SquaredDistanceReward(by_id[int(arg)].x0)
    else:
        raise ConfigError(f"unknown reward spec '{spec}' (use template:<shape>[/<style>] or reference:<sample_id>)")
    return ExternalReward(fn, cond, beta_inv)


@cli.command()
@click.option("--checkpoint", default=None)
@click.option("--pos", "pos", required=True, help="c+ (shape name, id, 'null', or a+b)")
@click.option("--neg", "neg", default="null", show_default=True, help="c-")
@click.option("--base", "base", default=None, help="c (defaults to c+)")
@click.option("--reward", default=None, help="external reward instead of the slider: template:<shape>[/<style>] | reference:<id>")
@click.option("--name", default=None, help="file stem for utility-<name>.ctug")
@click.pass_obj
def utility(state: CliState, checkpoint, pos, neg, base, reward, name):
    """Utility gradient for a concept trio or an external reward"""
    cfg, out = state.config, state.out_dir
    model = _checkpoint(state, checkpoint)
    n = model.arch.n_concepts
    c_pos = _resolve_concept(pos, n, model.null_id)
    c_neg = _resolve_concept(neg, n, model.null_id)
    c_base = _resolve_concept(base, n, model.null_id) if base else c_pos
    trio = ConceptTrio(c_base, c_pos, c_neg, cfg.gradients.beta_inv)
    g = cfg.gradients
    seed = cfg.seed_for("utility")
    provider = None
    if reward:
        dataset = bench.build_dataset(cfg.dataset, cfg.seed_for("dataset"))
        provider = _reward_from_spec(reward, c_base, g.beta_inv, cfg.dataset.resolution, dataset)
    agg = bench.trio_utility_gradient(model, trio, cfg, seed, provider)
    ug = UtilityGradient.from_aggregate(Projector.from_config(cfg.projector, model.n_base_params), agg,
                                        cfg.projection_fingerprint())
    name = name or pos.replace("+", "-")
    path = out / f"utility-{name}.ctug"
    ug.save(path)
    flag = " (degenerate)" if ug.degenerate else ""
    click.echo(f"✅ utility gradient written to {path}{flag}: {ug.descriptor}")


@cli.command()
@click.option("--store", "store_path", default=None, help="gradient store (default <out>/grads-<train_loss>.ctgs)")
@click.option("--hessian", "hessian_path", default=None)
@click.option("--utility", "utility_path", required=True)
@click.option("--top-k", type=click.IntRange(min=1), default=None, help="entries in the ranked summary")
@click.option("--name", default=None)
@click.pass_obj
def attribute(state: CliState, store_path, hessian_path, utility_path, top_k, name):
    """Score every stored sample against a utility gradient"""
    cfg, out = state.config, state.out_dir
    loss = cfg.gradients.train_loss
    store = GradientStore.open(store_path or out / f"grads-{loss}.ctgs")
    ug = UtilityGradient.load(utility_path)
    if ug.fingerprint != store.fingerprint:
        # gradients, schedule and projector settings must match the ones the store was built with
        raise FingerprintMismatchError(str(utility_path), store.fingerprint, ug.fingerprint)
    h = bench.hessian_for(store, Path(hessian_path) if hessian_path else out / f"hessian-{loss}.cthp")
    top_k = top_k or cfg.attribution.top_k
    name = name or Path(utility_path).stem.removeprefix("utility-")
    att = cfg.attribution
    lam = att.lambda_value if att.lambda_policy == "fixed" else None
    report = score_influences(store, h, ug.g_proj, lam, top_k, ug.descriptor, ug.fingerprint,
                              lambda_policy=att.lambda_policy if att.lambda_policy != "sweep" else "auto")
    report.metadata.update(degenerate=ug.degenerate, loss_kind=ug.loss_kind.value)
    report.write_json(out / f"report-{name}.json")
    report.write_csv(out / f"report-{name}.csv")
    if att.lambda_policy == "sweep":
        grid = lambda_grid(default_lambda(h), att.sweep_points, att.sweep_decades)
        for i, (lam_i, rep) in enumerate(lambda_sweep(store, h, ug.g_proj, grid, top_k, ug.descriptor, ug.fingerprint).items()):
            rep.write_json(out / f"report-{name}-sweep{i}.json")
            rep.write_csv(out / f"report-{name}-sweep{i}.csv")
    click.echo(f"✅ report-{name}.json: lambda={report.lambda_used:.4g}, top-{len(report.top_k)} "
               + ", ".join(str(sid) for sid, _ in report.top_k))


def _benchmark(state: CliState, ablations) -> None:
    cfg, out = state.config, state.out_dir
    run = bench.prepare_run(cfg, out, state.jobs, state.progress)
    summary = bench.run_benchmark(run, ablations, chart=cfg.benchmark.chart)
    for c in summary.configs:
        click.echo(f"📊 {c.id:>7}: " + ", ".join(f"{k}={v:.3f}" for k, v in c.recall.items()))
    click.echo(f"✅ summary written to {out / 'summary.json'}")


@cli.command(name="benchmark")
@click.pass_obj
def benchmark_cmd(state: CliState):
    """Exemplar retrieval for the configured method plus TRAK / D-TRAK baselines"""
    cfg = state.config
    ablations = [bench.from_gradients_config(cfg, "config")]
    if cfg.benchmark.sweep_baselines:
        ablations.append(bench.TRAK)
        if cfg.benchmark.include_dtrak:
            ablations.append(bench.DTRAK)
    _benchmark(state, ablations)


@cli.command()
@click.pass_obj
def ablate(state: CliState):
    """The cumulative ladder Base, A, B, C, D"""
    _benchmark(state, list(bench.ABLATION_LADDER))


@cli.command()
@click.option("--skip-influence", is_flag=True, help="only retrain; skip the Base/D influence comparison")
@click.pass_obj
def oracle(state: CliState, skip_influence):
    """Exact leave-one-out retraining on a small dataset; writes oracle.json"""
    cfg, out = state.config, state.out_dir
    o = cfg.oracle
    dataset = bench.oracle_dataset(cfg)
    data = dataset.data
    concept = o.target_concept
    if concept >= o.n_shapes:
        raise ConfigError(f"oracle.target_concept={concept} outside the {o.n_shapes} oracle shapes")
    removed: List = list(o.removed_ids) if o.removed_ids is not None else [p.sample_id for p in data]
    matched = {p.sample_id for p in data if p.concept_id == concept}
    removed.append(sorted(matched))
    seed = cfg.seed_for("oracle")

    influences = {}
    if not skip_influence:
        model, _ = bench.train_model(cfg, data, seed=derive_seed(seed, "oracle-train"), n_concepts=o.n_shapes,
                                     training=cfg.training.model_copy(update={"steps": o.training_steps}))
        for ablation in (bench.BASE, bench.ABL_D):
            settings = bench.GradientSettings.from_config(cfg, ablation)
            projector = Projector.from_config(cfg.projector, model.n_base_params)
            store = bench.build_gradient_store(model, data, settings, projector, out / f"oracle-grads-{ablation.id}.ctgs",
                                               cfg.projection_fingerprint(**ablation.gradient_overrides), state.jobs)
            h = bench.hessian_for(store)
            ocfg = cfg.with_section("gradients", normalize=ablation.normalize, utility_loss=ablation.utility_loss)
            influences[ablation.id] = bench.run_global_attribution(model, concept, store, h, ocfg, seed).scores

    results = bench.loo_oracle(cfg, data, removed, concept, seed, state.jobs, influences.get("D"))
    floor = bench.loo_noise_floor(cfg, data, concept, seed, o.replicates, state.jobs)
    payload = {
        "fingerprint": cfg.fingerprint(),
        "target_concept": concept,
        "noise_floor": floor,
        "results": [
            {"removed": list(r.removed_group), "delta_utility": r.delta_utility, "rank_by_influence": r.rank_by_influence}
            for r in results
        ],
        "agreement": {k: bench.loo_agreement(results, v, matched) for k, v in influences.items()},
    }
    atomic_write(out / "oracle.json", canonical_json(payload))
    click.echo(f"✅ {len(results)} retrainings, noise floor {floor:.4g}; written to {out / 'oracle.json'}")
    for k, v in payload["agreement"].items():
        if "spearman_rho" in v:
            click.echo(f"📈 {k}: Spearman rho={v['spearman_rho']:.3f}")


def main(argv: Optional[List[str]] = None) -> None:
    cli.main(args=argv, prog_name="ctrak")
