import json
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import benchmark as bench
from config import DatasetConfig
from errors import FingerprintMismatchError, InvalidArgumentError, InvalidStateError
from projection_store import InfluenceReport, Projector
from scorenet import save_checkpoint
from toy_fixtures import run_tests, tiny_config

SCHEMA = Path(__file__).parent / "schemas" / "benchmark_summary.schema.json"


def test_dataset_counts_and_oracle():
    data, oracle = bench.generate_dataset(4, 2, 3, seed=1, resolution=16, max_shift=1)
    assert len(data) == 4 * 2 * 3
    assert len({p.sample_id for p in data}) == len(data)
    X = np.stack([p.x0 for p in data])
    assert X.min() >= -1.0 and X.max() <= 1.0
    assert oracle.accuracy(X, [p.concept_id for p in data]) == 1.0
    assert oracle.style_accuracy(X, [p.style_id for p in data]) == 1.0
    again, _ = bench.generate_dataset(4, 2, 3, seed=1, resolution=16, max_shift=1)
    np.testing.assert_array_equal(X, np.stack([p.x0 for p in again]))


def test_withheld_cells_hold_only_exemplars():
    cfg = DatasetConfig(n_shapes=4, n_styles=2, per_cell=5, resolution=8, n_exemplar_concepts=3, exemplars_per_concept=2)
    ds = bench.build_dataset(cfg, seed=0)
    assert sorted(ds.exemplars) == [0, 1, 2]
    by_id = ds.by_id()
    for k, ids in ds.exemplars.items():
        assert len(ids) == 2
        assert all(by_id[i].concept_id == k and by_id[i].style_id == ds.exemplar_style(k) for i in ids)
    assert len(ds.data) == 4 * 2 * 5 - 3 * (5 - 2)


def test_dataset_rejects_degenerate_grids():
    with pytest.raises(InvalidArgumentError):
        bench.generate_dataset(1, 2, 2, seed=0)


def test_recall_flags_are_monotone():
    flags = bench.recall_flags([5, 3, 9, 1], {9, 1}, [1, 2, 3, 4])
    assert flags == {1: False, 2: False, 3: True, 4: True}
    assert bench.recall_flags([5, 3], {7}, [1, 10]) == {1: False, 10: False}


def test_rank_all_breaks_ties_by_id():
    ids = np.array([8, 2, 5])
    G = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    ranked = bench._rank_all(ids, G, np.eye(2), 1.0, np.array([[1.0, 0.0], [0.0, 1.0]]), depth=10)
    assert ranked.shape == (2, 3)
    assert list(ranked[0]) == [2, 8, 5]
    assert list(ranked[1][:1]) == [5]


def test_ablation_keys_share_stores():
    assert bench.BASE.store_key == bench.ABL_A.store_key == "dsm"
    assert bench.ABL_B.store_key == "dps"
    assert bench.ABL_C.store_key == "dps-inv"
    assert bench.ABL_D.store_key == "dps-inv-norm"
    assert bench.ABL_A.utility_key == bench.ABL_B.utility_key != bench.ABL_D.utility_key
    assert [c.id for c in bench.ABLATION_LADDER] == ["Base", "A", "B", "C", "D"]


def test_exemplar_only_pool_has_perfect_recall():
    cfg = tiny_config()
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        run = bench.prepare_run(cfg, out)
        assert len(run.queries) == 2 and len(run.tokens) == 1
        run.pool_ids = set(run.dataset.exemplars[0])
        summary = bench.run_benchmark(run, [bench.BASE, bench.ABL_D], chart=False)
        assert [c.id for c in summary.configs] == ["Base", "D"]
        for c in summary.configs:
            assert c.recall == {"recall@1": 1.0}
            assert c.n_queries == 2
        assert summary.pool_size == 2
        assert (out / "benchmark-Base.csv").exists() and (out / "benchmark-D.csv").exists()
        assert (out / "grads-dsm.ctgs").exists() and (out / "grads-dps-inv-norm.ctgs").exists()

        written = json.loads((out / "summary.json").read_text())
        assert bench.BenchmarkSummary.model_validate(written) == summary
        schema = json.loads(SCHEMA.read_text())
        assert set(written) == set(schema["properties"])
        assert set(schema["required"]) <= set(written)
        assert set(written["configs"][0]) == set(schema["$defs"]["ConfigResult"]["properties"])


def test_summary_schema_matches_model():
    schema = json.loads(SCHEMA.read_text())
    generated = bench.BenchmarkSummary.model_json_schema()
    assert set(schema["properties"]) == set(generated["properties"])
    assert set(schema["required"]) == set(generated["required"])
    assert set(schema["$defs"]["ConfigResult"]["required"]) == set(generated["$defs"]["ConfigResult"]["required"])


def test_stale_store_is_rebuilt_after_settings_change():
    cfg = tiny_config()
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        run = bench.prepare_run(cfg, out)
        store, h = run.store_for(bench.ABL_D)
        first = (out / "grads-dps-inv-norm.ctgs").read_bytes()
        assert store.fingerprint == cfg.projection_fingerprint(**bench.ABL_D.gradient_overrides)
        assert h.fingerprint == store.fingerprint

        # same settings: the file on disk is reused as is
        again = replace(run, _stores={}, _utilities={})
        assert again.store_for(bench.ABL_D)[0].fingerprint == store.fingerprint
        assert (out / "grads-dps-inv-norm.ctgs").read_bytes() == first

        changed = cfg.with_section("gradients", n_timesteps=3)
        rerun = replace(run, run_config=changed, _stores={}, _utilities={})
        new_store, new_h = rerun.store_for(bench.ABL_D)
        assert new_store.fingerprint == changed.projection_fingerprint(**bench.ABL_D.gradient_overrides)
        assert new_store.fingerprint != store.fingerprint
        assert new_h.fingerprint == new_store.fingerprint
        assert bench.hessian_for(new_store, out / "hessian-dps-inv-norm.cthp").fingerprint == new_store.fingerprint
        assert (out / "grads-dps-inv-norm.ctgs").read_bytes() != first


def test_checkpoint_reuse_and_mismatch():
    cfg = tiny_config()
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        data = bench.build_dataset(cfg.dataset, cfg.seed_for("dataset")).data
        model = bench.ensure_checkpoint(cfg, data, out)
        assert (out / "training_curve.csv").read_text().startswith("step,dsm_loss")
        again = bench.ensure_checkpoint(cfg, data, out)
        assert again.base_hash() == model.base_hash()
        assert bench.load_matching_checkpoint(cfg, out / "checkpoint.ctrk").base_hash() == model.base_hash()
        save_checkpoint(model, out / "other.ctrk", "0" * 32)
        with pytest.raises(FingerprintMismatchError):
            bench.load_matching_checkpoint(cfg, out / "other.ctrk")


def test_parallel_store_matches_serial():
    cfg = tiny_config()
    data = bench.build_dataset(cfg.dataset, cfg.seed_for("dataset")).data
    model, _ = bench.train_model(cfg, data)
    settings = bench.GradientSettings.from_config(cfg, bench.ABL_D)
    projector = Projector.from_config(cfg.projector, model.n_base_params)
    with tempfile.TemporaryDirectory() as tmp:
        fp = cfg.projection_fingerprint(**bench.ABL_D.gradient_overrides)
        serial = bench.build_gradient_store(model, data, settings, projector, Path(tmp) / "a.ctgs", fp, jobs=1)
        parallel = bench.build_gradient_store(model, data, settings, projector, Path(tmp) / "b.ctgs", fp, jobs=2)
        np.testing.assert_array_equal(serial.ids(), [p.sample_id for p in data])
        np.testing.assert_array_equal(serial.records()["g"], parallel.records()["g"])


def test_global_and_local_attribution():
    cfg = tiny_config()
    data = bench.build_dataset(cfg.dataset, cfg.seed_for("dataset")).data
    model, _ = bench.train_model(cfg, data)
    settings = bench.GradientSettings.from_config(cfg)
    projector = Projector.from_config(cfg.projector, model.n_base_params)
    with tempfile.TemporaryDirectory() as tmp:
        store = bench.build_gradient_store(model, data, settings, projector, Path(tmp) / "g.ctgs",
                                           cfg.projection_fingerprint())
        h = bench.hessian_for(store, Path(tmp) / "h.cthp")
        assert bench.hessian_for(store, Path(tmp) / "h.cthp").count == len(data)

        glob = bench.run_global_attribution(model, 1, store, h, cfg, seed=5)
        assert glob.scope == "global" and set(glob.scores) == {p.sample_id for p in data}
        assert len(glob.top_k) == cfg.attribution.top_k

        image = bench.generate(model, (1,), np.random.default_rng(0).standard_normal(model.d_x), 4)
        before = model.n_rows
        local = bench.run_local_attribution(model, image, store, h, cfg, seed=5, context=(1,))
        assert local.scope == "local" and local.utility_descriptor.startswith("local:")
        assert model.n_rows == before
        assert set(local.scores) == set(glob.scores)


def test_style_concentration():
    cfg = tiny_config()
    ds = bench.build_dataset(cfg.dataset, 0)
    by_id = ds.by_id()
    style0 = [p.sample_id for p in ds.data if p.style_id == 0]
    style1 = [p.sample_id for p in ds.data if p.style_id == 1]
    scores = {sid: 2.0 for sid in style0[:2]}
    scores.update({sid: 1.0 for sid in style1[:2]})
    report = InfluenceReport(utility_descriptor="x", scores=scores, top_k=[], lambda_used=1.0, default_lambda=1.0,
                             config_fingerprint="0" * 32)
    assert bench.style_concentration(report, by_id, 0, k=2) == 1.0
    assert bench.style_concentration(report, by_id, 0, k=4) == 0.5


def test_oracle_guards():
    cfg = tiny_config()
    data = bench.oracle_dataset(cfg).data
    assert len(data) == 4
    small = cfg.with_section("oracle", max_samples=2)
    with pytest.raises(InvalidStateError):
        bench.loo_oracle(small, data, [data[0].sample_id], 0, seed=1)
    with pytest.raises(InvalidArgumentError):
        bench.loo_oracle(cfg, data, [999], 0, seed=1)
    with pytest.raises(InvalidArgumentError):
        bench.loo_noise_floor(cfg, data, 0, seed=1, replicates=1)
    with pytest.raises(InvalidArgumentError):
        bench.LooOracleResult(0, float("nan"))


def test_oracle_retraining_is_deterministic():
    cfg = tiny_config()
    data = bench.oracle_dataset(cfg).data
    removed = [data[0].sample_id, [p.sample_id for p in data if p.concept_id == 0]]
    influence = {p.sample_id: float(-p.sample_id) for p in data}
    a = bench.loo_oracle(cfg, data, removed, 0, seed=2, influence=influence)
    b = bench.loo_oracle(cfg, data, removed, 0, seed=2)
    assert [r.delta_utility for r in a] == [r.delta_utility for r in b]
    assert a[0].rank_by_influence == 1
    assert a[1].rank_by_influence is None and len(a[1].removed_group) == 2
    assert bench.loo_noise_floor(cfg, data, 0, seed=2, replicates=2) >= 0.0


def test_loo_agreement_statistics():
    results = [bench.LooOracleResult(i, float(i)) for i in range(6)]
    influence = {i: 10.0 * i for i in range(6)}
    out = bench.loo_agreement(results, influence, matched_ids={3, 4, 5})
    assert out["n"] == 6.0
    assert out["spearman_rho"] == pytest.approx(1.0)
    assert out["mannwhitney_p"] < 0.1


def main():
    """Run benchmark tests"""
    print("🧪 Benchmark tests\n")
    ok = run_tests([
        test_dataset_counts_and_oracle,
        test_withheld_cells_hold_only_exemplars,
        test_dataset_rejects_degenerate_grids,
        test_recall_flags_are_monotone,
        test_rank_all_breaks_ties_by_id,
        test_ablation_keys_share_stores,
        test_exemplar_only_pool_has_perfect_recall,
        test_summary_schema_matches_model,
        test_stale_store_is_rebuilt_after_settings_change,
        test_checkpoint_reuse_and_mismatch,
        test_parallel_store_matches_serial,
        test_global_and_local_attribution,
        test_style_concentration,
        test_oracle_guards,
        test_oracle_retraining_is_deterministic,
        test_loo_agreement_statistics,
    ])
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
