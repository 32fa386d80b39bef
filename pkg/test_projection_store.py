import os
import struct
import tempfile
from pathlib import Path

import crcmod.predefined
import numpy as np
import pytest

from attribution_losses import AggregatedGradient, LossKind
from containers import CHECKSUM_SIZE, checksum64
from errors import (
    ConfigurationError,
    ConflictError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalError,
    StorageError,
)
from projection_store import (
    HEADER,
    GradientStore,
    InfluenceReport,
    ProjectedGradientRecord,
    ProjectedHessian,
    Projector,
    UtilityGradient,
    accumulate_fp,
    default_lambda,
    lambda_grid,
    lambda_sweep,
    project,
    project_batch,
    project_record,
    record_dtype,
    score_influences,
    solve_regularized,
    store_append,
)
from toy_fixtures import run_tests

FP = "0123456789abcdef0123456789abcdef"
OTHER_FP = "f" * 32


def _records(n: int, k: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [ProjectedGradientRecord(i * 3, rng.standard_normal(k), float(i + 1), LossKind.DPS, 8) for i in range(n)]


def _write_store(path, n=12, k=5, seed=0, fingerprint=FP):
    with GradientStore.create(path, k, 42, fingerprint) as store:
        for rec in _records(n, k, seed):
            store_append(store, rec)
    return GradientStore.open(path)


def test_projector_is_blockwise_consistent():
    p = Projector(seed=3, d=50, k=7, block_rows=8)
    g = np.random.default_rng(0).standard_normal(50)
    np.testing.assert_allclose(project(p, g), p.dense().T @ g, atol=1e-12)
    G = np.random.default_rng(1).standard_normal((4, 50))
    np.testing.assert_allclose(project_batch(p, G), G @ p.dense(), atol=1e-12)
    np.testing.assert_array_equal(Projector(3, 50, 7, block_rows=8).dense(), p.dense())
    np.testing.assert_allclose(np.abs(p.dense()) * np.sqrt(7), 1.0)


def test_projector_preserves_inner_products():
    d, k = 4000, 512
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal(d), rng.standard_normal(d)
    b = 0.6 * a + 0.8 * b
    for distribution in ("rademacher", "gaussian"):
        p = Projector(seed=11, d=d, k=k, distribution=distribution, block_rows=1000)
        pa, pb = project(p, a), project(p, b)
        assert abs(np.linalg.norm(pa) / np.linalg.norm(a) - 1.0) < 0.2
        cos = pa @ pb / (np.linalg.norm(pa) * np.linalg.norm(pb))
        true_cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(cos - true_cos) < 0.15


def test_projector_validation():
    with pytest.raises(InvalidArgumentError):
        Projector(seed=0, d=4, k=5)
    with pytest.raises(InvalidArgumentError):
        Projector(seed=0, d=4, k=2, distribution="uniform")
    with pytest.raises(InvalidArgumentError):
        project(Projector(seed=0, d=4, k=2), np.zeros(5))


def test_project_record_keeps_metadata():
    p = Projector(seed=0, d=6, k=3)
    agg = AggregatedGradient(np.arange(6.0), 4, True, "x", LossKind.DTRAK)
    rec = project_record(p, agg, 17)
    assert rec.sample_id == 17 and rec.loss_kind == LossKind.DTRAK and rec.n_timesteps == 4
    assert rec.g_proj.dtype == np.float32
    assert rec.norm_pre_projection == pytest.approx(np.linalg.norm(np.arange(6.0)))


def test_store_roundtrip():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "grads.ctgs"
        store = _write_store(path)
        assert len(store) == 12 and store.k == 5 and store.projector_seed == 42
        assert store.fingerprint == FP
        expected = _records(12, 5)
        for got, want in zip(store.scan(), expected):
            assert got.sample_id == want.sample_id
            np.testing.assert_array_equal(got.g_proj, want.g_proj)
            assert got.loss_kind == LossKind.DPS and got.n_timesteps == 8
        np.testing.assert_array_equal(store.ids(), [r.sample_id for r in expected])
        blocks = list(store.iter_blocks(block=5))
        assert [len(ids) for ids, _ in blocks] == [5, 5, 2]


def test_store_rejects_duplicates_and_closed_writes():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "grads.ctgs"
        with pytest.raises(ConflictError):
            with GradientStore.create(path, 5, 0, FP) as store:
                rec = _records(1, 5)[0]
                store.append(rec)
                store.append(rec)
        with pytest.raises(StorageError):
            GradientStore.open(path)

        store = _write_store(path)
        with pytest.raises(InvalidStateError):
            store.append(_records(1, 5)[0])
        appender = GradientStore.open(path, mode="a")
        with pytest.raises(ConflictError):
            appender.append(_records(1, 5)[0])
        with pytest.raises(InvalidArgumentError):
            appender.append(ProjectedGradientRecord(999, np.zeros(4), 1.0, LossKind.DSM, 1))
        appender.append(ProjectedGradientRecord(999, np.ones(5), 1.0, LossKind.DSM, 1))
        appender.seal()
        reopened = GradientStore.open(path)
        assert len(reopened) == 13
        assert reopened.ids()[-1] == 999


def test_store_detects_corruption():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "grads.ctgs"
        _write_store(path)
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(StorageError):
            GradientStore.open(path)
        path.write_bytes(bytes(raw[:-3]))
        with pytest.raises(StorageError):
            GradientStore.open(path)


def test_hessian_matches_closed_form():
    with tempfile.TemporaryDirectory() as tmp:
        store = _write_store(Path(tmp) / "grads.ctgs", n=9, k=4)
        G = np.stack([r.g_proj.astype(np.float64) for r in _records(9, 4)])
        h = accumulate_fp(store, block=4)
        np.testing.assert_allclose(h.F, G.T @ G / 9, atol=1e-12)
        np.testing.assert_array_equal(h.F, h.F.T)
        assert h.count == 9 and h.fingerprint == FP
        assert default_lambda(h) == pytest.approx(0.1 * np.trace(G.T @ G / 9) / 4)

        hpath = os.path.join(tmp, "h.cthp")
        h.save(hpath)
        loaded = ProjectedHessian.load(hpath)
        np.testing.assert_array_equal(loaded.F, h.F)
        assert loaded.fingerprint == FP


def test_empty_store_has_no_hessian():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "empty.ctgs"
        with GradientStore.create(path, 3, 0, FP):
            pass
        with pytest.raises(InvalidStateError):
            accumulate_fp(GradientStore.open(path))


def test_lambda_grid_is_centred():
    grid = lambda_grid(0.5, points=9, decades=4.0)
    assert len(grid) == 9
    assert grid[4] == pytest.approx(0.5)
    assert grid[0] == pytest.approx(0.5e-4) and grid[-1] == pytest.approx(0.5e4)


def test_solve_regularized():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((6, 4))
    F = A.T @ A / 6
    g = rng.standard_normal(4)
    y = solve_regularized(F, 0.3, g)
    np.testing.assert_allclose((F + 0.3 * np.eye(4)) @ y, g, atol=1e-10)
    with pytest.raises(NumericalError):
        solve_regularized(np.zeros((3, 3)), 0.0, np.ones(3))


def test_scores_match_dense_computation():
    with tempfile.TemporaryDirectory() as tmp:
        store = _write_store(Path(tmp) / "grads.ctgs", n=10, k=4, seed=3)
        h = accumulate_fp(store)
        u = np.random.default_rng(4).standard_normal(4)
        report = score_influences(store, h, u, top_k=3, descriptor="dense-check", utility_fingerprint=FP)
        G = np.stack([r.g_proj.astype(np.float64) for r in _records(10, 4, seed=3)])
        lam = default_lambda(h)
        expected = G @ np.linalg.solve(h.F + lam * np.eye(4), u)
        ids = [r.sample_id for r in _records(10, 4)]
        np.testing.assert_allclose([report.scores[i] for i in ids], expected, rtol=1e-9)
        assert report.lambda_used == report.default_lambda == lam
        order = np.argsort(-expected, kind="stable")[:3]
        assert [sid for sid, _ in report.top_k] == [ids[i] for i in order]
        assert report.ranked()[:3] == report.top_k


def test_score_ties_break_by_sample_id():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ties.ctgs"
        with GradientStore.create(path, 2, 0, FP) as store:
            for sid in (7, 3, 5):
                store.append(ProjectedGradientRecord(sid, np.array([1.0, 0.0]), 1.0, LossKind.DSM, 1))
        store = GradientStore.open(path)
        h = ProjectedHessian(np.eye(2), 3, FP)
        report = score_influences(store, h, np.array([1.0, 0.0]), lam=1.0)
        assert [sid for sid, _ in report.top_k] == [3, 5, 7]


def test_fingerprint_mismatch_is_rejected():
    with tempfile.TemporaryDirectory() as tmp:
        store = _write_store(Path(tmp) / "grads.ctgs", k=3)
        h = accumulate_fp(store)
        with pytest.raises(ConfigurationError):
            score_influences(store, ProjectedHessian(h.F, h.count, OTHER_FP), np.ones(3))
        with pytest.raises(ConfigurationError):
            score_influences(store, h, np.ones(3), utility_fingerprint=OTHER_FP)
        with pytest.raises(InvalidArgumentError):
            score_influences(store, h, np.ones(4))
        with pytest.raises(InvalidArgumentError):
            score_influences(store, h, np.ones(3), lam=-1.0)


def test_lambda_sweep_reports_every_value():
    with tempfile.TemporaryDirectory() as tmp:
        store = _write_store(Path(tmp) / "grads.ctgs", k=3)
        h = accumulate_fp(store)
        grid = lambda_grid(default_lambda(h), points=3, decades=1.0)
        reports = lambda_sweep(store, h, np.ones(3), grid)
        assert sorted(reports) == sorted(grid)
        assert all(r.lambda_policy == "sweep" for r in reports.values())
        with pytest.raises(InvalidArgumentError):
            lambda_sweep(store, h, np.ones(3), [0.0, 1.0])


def test_report_files():
    report = InfluenceReport(utility_descriptor="u", scores={4: 0.5, 1: 2.0, 9: 0.5}, top_k=[(1, 2.0)],
                             lambda_used=0.1, default_lambda=0.1, config_fingerprint=FP)
    with tempfile.TemporaryDirectory() as tmp:
        jpath, cpath = Path(tmp) / "r.json", Path(tmp) / "r.csv"
        report.write_json(jpath)
        assert InfluenceReport.read_json(jpath).scores == report.scores
        report.write_csv(cpath)
        lines = cpath.read_text().splitlines()
        assert lines[0] == "rank,sample_id,score"
        assert [line.split(",")[1] for line in lines[1:]] == ["1", "4", "9"]


def test_utility_gradient_file():
    p = Projector(seed=1, d=8, k=3)
    agg = AggregatedGradient(np.linspace(-1, 1, 8), 6, True, "slider(...)", LossKind.REWARD_DPS)
    ug = UtilityGradient.from_aggregate(p, agg, FP)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "u.ctug"
        ug.save(path)
        loaded = UtilityGradient.load(path)
    np.testing.assert_array_equal(loaded.g_proj, ug.g_proj)
    assert loaded.loss_kind == LossKind.REWARD_DPS and loaded.descriptor == "slider(...)"
    assert loaded.fingerprint == FP and loaded.normalized


def test_store_footer_is_crc64_of_body():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "grads.ctgs"
        _write_store(path, n=4, k=3)
        raw = path.read_bytes()
        assert len(raw) == HEADER.size + 4 * record_dtype(3).itemsize + CHECKSUM_SIZE
        assert raw[-CHECKSUM_SIZE:] == checksum64(raw[:-CHECKSUM_SIZE])
        crc = crcmod.predefined.mkPredefinedCrcFun("crc-64")
        assert struct.unpack("<Q", raw[-CHECKSUM_SIZE:])[0] == crc(raw[:-CHECKSUM_SIZE])


def test_bulk_appends_then_full_scan():
    n, k = 100_000, 2
    rng = np.random.default_rng(11)
    G = rng.standard_normal((n, k)).astype("<f4")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bulk.ctgs"
        with GradientStore.create(path, k, 0, FP) as store:
            for i in range(n):
                store_append(store, ProjectedGradientRecord(i, G[i], 1.0, LossKind.DSM, 1))
        reopened = GradientStore.open(path)
        assert len(reopened) == n
        reopened.verify()
        np.testing.assert_array_equal(reopened.ids(), np.arange(n))
        np.testing.assert_array_equal(reopened.records()["g"], G)
        assert sum(len(ids) for ids, _ in reopened.iter_blocks()) == n


def test_single_record_hessian_is_outer_product():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "one.ctgs"
        g = np.array([0.5, -2.0, 1.25], dtype="<f4")
        with GradientStore.create(path, 3, 0, FP) as store:
            store_append(store, ProjectedGradientRecord(4, g, 1.0, LossKind.DSM, 1))
        h = accumulate_fp(GradientStore.open(path))
        g64 = g.astype(np.float64)
        np.testing.assert_array_equal(h.F, np.outer(g64, g64))
        assert h.count == 1


def test_default_lambda_matches_eigenvalues():
    rng = np.random.default_rng(8)
    for k in (2, 7, 32):
        A = rng.standard_normal((k + 3, k))
        F = A.T @ A / (k + 3)
        h = ProjectedHessian(F, k + 3, FP)
        assert default_lambda(h) == pytest.approx(0.1 * np.mean(np.linalg.eigvalsh(F)), rel=1e-10)
    assert default_lambda(ProjectedHessian(np.eye(4), 1, FP)) == pytest.approx(0.1)
    assert default_lambda(ProjectedHessian(np.diag([2.0, 0.0]), 1, FP)) == pytest.approx(0.1)


def test_linear_algebra_matches_dense_at_n64_k32():
    n, k = 64, 32
    with tempfile.TemporaryDirectory() as tmp:
        store = _write_store(Path(tmp) / "grads.ctgs", n=n, k=k, seed=5)
        records = _records(n, k, seed=5)
        G = np.stack([r.g_proj.astype(np.float64) for r in records])
        ids = [r.sample_id for r in records]
        h = accumulate_fp(store, block=10)
        dense_F = G.T @ G / n
        assert np.max(np.abs(h.F - dense_F)) < 1e-6 * np.max(np.abs(dense_F))
        lam = default_lambda(h)
        assert lam == pytest.approx(0.1 * np.mean(np.linalg.eigvalsh(dense_F)), rel=1e-6)
        u = np.random.default_rng(6).standard_normal(k)
        report = score_influences(store, h, u, utility_fingerprint=FP)
        expected = G @ np.linalg.inv(dense_F + lam * np.eye(k)) @ u
        got = np.array([report.scores[i] for i in ids])
        assert np.max(np.abs(got - expected)) < 1e-6 * np.max(np.abs(expected))


def test_identity_hessian_without_damping_gives_inner_products():
    with tempfile.TemporaryDirectory() as tmp:
        store = _write_store(Path(tmp) / "grads.ctgs", n=8, k=4, seed=9)
        G = np.stack([r.g_proj.astype(np.float64) for r in _records(8, 4, seed=9)])
        u = np.array([1.0, -0.5, 2.0, 0.25])
        report = score_influences(store, ProjectedHessian(np.eye(4), 8, FP), u, lam=0.0)
        ids = [r.sample_id for r in _records(8, 4)]
        np.testing.assert_allclose([report.scores[i] for i in ids], G @ u, rtol=1e-12)


def test_large_lambda_converges_to_inner_products():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "grads.ctgs"
        u = np.array([0.6, -0.8, 0.0, 0.0])
        junk = [np.array([0.8, 0.6, 0.0, 0.0]), np.array([0.0, 0.0, 1.0, 0.0]), np.array([0.0, 0.0, 0.0, -1.0])]
        with GradientStore.create(path, 4, 0, FP) as store:
            store_append(store, ProjectedGradientRecord(5, u, 1.0, LossKind.DSM, 1))
            for sid, g in enumerate(junk):
                store_append(store, ProjectedGradientRecord(sid, g, 1.0, LossKind.DSM, 1))
        store = GradientStore.open(path)
        h = accumulate_fp(store)
        lam_star = default_lambda(h)
        reports = lambda_sweep(store, h, u, lambda_grid(lam_star, 9, 4.0) + [1e8 * lam_star])
        limit = reports[1e8 * lam_star]
        assert limit.top_k[0][0] == 5
        G = store.records()["g"].astype(np.float64)
        inner = dict(zip(store.ids().tolist(), G @ u))
        for sid, score in limit.scores.items():
            assert abs(score * limit.lambda_used - inner[sid]) <= 1e-3 * max(abs(inner[sid]), 1.0)
        # the distance to the limit shrinks along the grid
        gaps = []
        for lam in sorted(reports):
            scaled = np.array([reports[lam].scores[s] * lam for s in sorted(inner)])
            gaps.append(np.max(np.abs(scaled - np.array([inner[s] for s in sorted(inner)]))))
        assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_scores_do_not_depend_on_record_order():
    with tempfile.TemporaryDirectory() as tmp:
        forward = _write_store(Path(tmp) / "a.ctgs", n=20, k=6, seed=12)
        with GradientStore.create(Path(tmp) / "b.ctgs", 6, 42, FP) as store:
            for rec in reversed(_records(20, 6, seed=12)):
                store_append(store, rec)
        backward = GradientStore.open(Path(tmp) / "b.ctgs")
        u = np.random.default_rng(13).standard_normal(6)
        a = score_influences(forward, accumulate_fp(forward), u, top_k=5)
        b = score_influences(backward, accumulate_fp(backward), u, top_k=5)
        assert set(a.scores) == set(b.scores)
        for sid in a.scores:
            assert b.scores[sid] == pytest.approx(a.scores[sid], rel=1e-9, abs=1e-12)
        assert [sid for sid, _ in a.top_k] == [sid for sid, _ in b.top_k]


def main():
    """Run projection and store tests"""
    print("🧪 Projection and gradient store tests\n")
    ok = run_tests([
        test_projector_is_blockwise_consistent,
        test_projector_preserves_inner_products,
        test_projector_validation,
        test_project_record_keeps_metadata,
        test_store_roundtrip,
        test_store_rejects_duplicates_and_closed_writes,
        test_store_detects_corruption,
        test_hessian_matches_closed_form,
        test_empty_store_has_no_hessian,
        test_lambda_grid_is_centred,
        test_solve_regularized,
        test_scores_match_dense_computation,
        test_score_ties_break_by_sample_id,
        test_fingerprint_mismatch_is_rejected,
        test_lambda_sweep_reports_every_value,
        test_report_files,
        test_utility_gradient_file,
        test_store_footer_is_crc64_of_body,
        test_bulk_appends_then_full_scan,
        test_single_record_hessian_is_outer_product,
        test_default_lambda_matches_eigenvalues,
        test_linear_algebra_matches_dense_at_n64_k32,
        test_identity_hessian_without_damping_gives_inner_products,
        test_large_lambda_converges_to_inner_products,
        test_scores_do_not_depend_on_record_order,
    ])
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
