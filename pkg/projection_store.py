"""
Random projection of gradients, the on-disk gradient store, projected Hessian
accumulation and influence scoring.

Gradient store (.ctgs), little-endian:
    header  "CTGS" | u32 version | u32 k | u64 count | u64 projector seed | 16-byte fingerprint
    records u64 sample_id | u8 loss_kind | u32 n_timesteps | f32 norm | k x f32
    footer  u64 CRC-64 of header + records (present once sealed)
"""

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import linalg

from attribution_losses import AggregatedGradient, LossKind
from containers import CHECKSUM_SIZE, crc64, pack_crc, read_container, write_container
from errors import (
    ConfigurationError,
    ConflictError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalError,
    StorageError,
    require_finite,
)
from logs import get_logger

logger = get_logger(__name__)

STORE_MAGIC = b"CTGS"
STORE_VERSION = 1
HEADER = struct.Struct("<4sIIQQ16s")
HESSIAN_MAGIC = b"CTHP"
UTILITY_MAGIC = b"CTUG"
SCAN_BLOCK = 4096


@dataclass(frozen=True)
class Projector:
    """P in R^{d x k}, regenerated block by block from (seed, block index)"""

    seed: int
    d: int
    k: int
    distribution: Literal["rademacher", "gaussian"] = "rademacher"
    block_rows: int = 8192

    def __post_init__(self):
        if self.k < 1 or self.k > self.d:
            raise InvalidArgumentError(f"projection dimension k={self.k} must lie in [1, d={self.d}]")
        if self.distribution not in ("rademacher", "gaussian"):
            raise InvalidArgumentError(f"unknown projection distribution {self.distribution}")

    @classmethod
    def from_config(cls, cfg, d: int) -> "Projector":
        return cls(cfg.seed, d, cfg.k, cfg.distribution, cfg.block_rows)

    def blocks(self) -> Iterator[Tuple[slice, np.ndarray]]:
        scale = 1.0 / np.sqrt(self.k)
        for b, start in enumerate(range(0, self.d, self.block_rows)):
            stop = min(start + self.block_rows, self.d)
            rng = np.random.default_rng((self.seed, b))
            if self.distribution == "rademacher":
                block = (rng.integers(0, 2, size=(stop - start, self.k)) * 2 - 1) * scale
            else:
                block = rng.standard_normal((stop - start, self.k)) * scale
            yield slice(start, stop), block

    def dense(self) -> np.ndarray:
        """Materialised P; only for small d * k"""
        return np.vstack([block for _, block in self.blocks()])


def project(projector: Projector, g: np.ndarray) -> np.ndarray:
    """P^T g in float64"""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (projector.d,):
        raise InvalidArgumentError(f"project: expected a vector of dimension {projector.d}, got {g.shape}")
    out = np.zeros(projector.k)
    for sl, block in projector.blocks():
        out += g[sl] @ block
    return out


def project_batch(projector: Projector, G: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != projector.d:
        raise InvalidArgumentError(f"project_batch: expected (B, {projector.d}), got {G.shape}")
    out = np.zeros((G.shape[0], projector.k))
    for sl, block in projector.blocks():
        out += G[:, sl] @ block
    return out


@dataclass
class ProjectedGradientRecord:
    sample_id: int
    g_proj: np.ndarray
    norm_pre_projection: float
    loss_kind: LossKind
    n_timesteps: int

    def __post_init__(self):
        self.g_proj = np.asarray(self.g_proj, dtype="<f4")
        require_finite(self.g_proj, f"projected gradient of sample {self.sample_id}")
        self.loss_kind = LossKind(self.loss_kind)


def project_record(projector: Projector, agg: AggregatedGradient, sample_id: int) -> ProjectedGradientRecord:
    return ProjectedGradientRecord(sample_id, project(projector, agg.g), agg.norm, agg.loss_kind, agg.n_timesteps)


def record_dtype(k: int) -> np.dtype:
    return np.dtype([
        ("sample_id", "<u8"),
        ("loss_kind", "u1"),
        ("n_timesteps", "<u4"),
        ("norm", "<f4"),
        ("g", "<f4", (k,)),
    ])


def _fp_bytes(fingerprint: str) -> bytes:
    raw = bytes.fromhex(fingerprint)
    if len(raw) != 16:
        raise InvalidArgumentError("fingerprint must be 16 bytes (32 hex characters)")
    return raw


class GradientStore:
    """Append-only record file; one writer, any number of readers once sealed"""

    def __init__(self, path: Path, k: int, projector_seed: int, fingerprint: str, count: int, mode: str):
        self.path = Path(path)
        self.k = k
        self.projector_seed = projector_seed
        self.fingerprint = fingerprint
        self.count = count
        self.mode = mode
        self.dtype = record_dtype(k)
        self._ids: set = set()
        self._fh = None

    # --- lifecycle -------------------------------------------------------------
    @classmethod
    def create(cls, path: Union[str, Path], k: int, projector_seed: int, fingerprint: str) -> "GradientStore":
        store = cls(Path(path), k, projector_seed, fingerprint, 0, "w")
        try:
            store.path.parent.mkdir(parents=True, exist_ok=True)
            store._fh = open(store.path, "w+b")
            store._fh.write(store._header())
            store._fh.flush()
        except OSError as e:
            raise StorageError(f"cannot create {path}: {e}") from e
        return store

    @classmethod
    def open(cls, path: Union[str, Path], mode: str = "r") -> "GradientStore":
        """Open a sealed store for reading ("r") or for further appends ("a")"""
        path = Path(path)
        try:
            size = path.stat().st_size
            with open(path, "rb") as f:
                header = f.read(HEADER.size)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e
        if len(header) < HEADER.size:
            raise StorageError(f"{path}: truncated header")
        magic, version, k, count, seed, fp = HEADER.unpack(header)
        if magic != STORE_MAGIC:
            raise StorageError(f"{path}: not a gradient store")
        if version != STORE_VERSION:
            raise StorageError(f"{path}: unsupported store version {version}")
        store = cls(path, k, seed, fp.hex(), count, mode)
        expected = HEADER.size + count * store.dtype.itemsize + CHECKSUM_SIZE
        if size != expected:
            raise StorageError(f"{path}: size {size} does not match {count} records (expected {expected}); store not sealed?")
        store.verify()
        if mode == "a":
            store._ids = set(int(i) for i in store.records()["sample_id"])
            store._fh = open(path, "r+b")
            store._fh.truncate(size - CHECKSUM_SIZE)
            store._fh.seek(0, os.SEEK_END)
        elif mode != "r":
            raise InvalidArgumentError(f"unknown store mode {mode}")
        return store

    def _header(self) -> bytes:
        return HEADER.pack(STORE_MAGIC, STORE_VERSION, self.k, self.count, self.projector_seed, _fp_bytes(self.fingerprint))

    def _digest(self) -> bytes:
        crc = crc64()
        with open(self.path, "rb") as f:
            remaining = HEADER.size + self.count * self.dtype.itemsize
            while remaining > 0:
                chunk = f.read(min(remaining, 1 << 20))
                if not chunk:
                    raise StorageError(f"{self.path}: truncated record section")
                crc.update(chunk)
                remaining -= len(chunk)
        return pack_crc(crc)

    def verify(self) -> None:
        with open(self.path, "rb") as f:
            f.seek(HEADER.size + self.count * self.dtype.itemsize)
            footer = f.read(CHECKSUM_SIZE)
        if footer != self._digest():
            raise StorageError(f"{self.path}: checksum mismatch")

    def seal(self) -> None:
        """Rewrite the header count, append the footer and fsync"""
        if self._fh is None:
            return
        try:
            self._fh.seek(0)
            self._fh.write(self._header())
            self._fh.flush()
            digest = self._digest()
            self._fh.seek(0, os.SEEK_END)
            self._fh.write(digest)
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
        except OSError as e:
            raise StorageError(f"cannot seal {self.path}: {e}") from e
        self._fh = None
        self.mode = "r"
        logger.info(f"sealed {self.path.name}: {self.count} records, k={self.k}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.seal()
        elif self._fh is not None:
            # left unsealed; open() refuses it
            self._fh.close()
            self._fh = None

    def __len__(self) -> int:
        return self.count

    # --- writing -------------------------------------------------------------------
    def append(self, record: ProjectedGradientRecord) -> None:
        if self._fh is None:
            raise InvalidStateError(f"{self.path} is not open for writing")
        if record.g_proj.shape != (self.k,):
            raise InvalidArgumentError(f"record has {record.g_proj.shape} values, store expects k={self.k}")
        sid = int(record.sample_id)
        if sid in self._ids:
            raise ConflictError(f"sample_id {sid} already present in {self.path.name}")
        row = np.zeros(1, dtype=self.dtype)
        row["sample_id"] = sid
        row["loss_kind"] = record.loss_kind.code
        row["n_timesteps"] = record.n_timesteps
        row["norm"] = record.norm_pre_projection
        row["g"] = record.g_proj
        try:
            self._fh.write(row.tobytes())
            self._fh.flush()
        except OSError as e:
            raise StorageError(f"cannot append to {self.path}: {e}") from e
        self._ids.add(sid)
        self.count += 1

    # --- reading ---------------------------------------------------------------------
    def records(self) -> np.ndarray:
        """Structured memmap over all records"""
        if self.count == 0:
            return np.zeros(0, dtype=self.dtype)
        return np.memmap(self.path, dtype=self.dtype, mode="r", offset=HEADER.size, shape=(self.count,))

    def scan(self) -> Iterator[ProjectedGradientRecord]:
        recs = self.records()
        for i in range(self.count):
            r = recs[i]
            yield ProjectedGradientRecord(int(r["sample_id"]), np.array(r["g"]), float(r["norm"]),
                                          LossKind.from_code(int(r["loss_kind"])), int(r["n_timesteps"]))

    def ids(self) -> np.ndarray:
        return np.asarray(self.records()["sample_id"], dtype=np.int64)

    def iter_blocks(self, block: int = SCAN_BLOCK) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """(sample_ids, G as float64) per block of records"""
        recs = self.records()
        for start in range(0, self.count, block):
            part = recs[start:start + block]
            yield np.asarray(part["sample_id"], dtype=np.int64), np.asarray(part["g"], dtype=np.float64)


def store_append(store: GradientStore, record: ProjectedGradientRecord) -> None:
    store.append(record)


# --- projected Hessian -------------------------------------------------------------
@dataclass
class ProjectedHessian:
    F: np.ndarray
    count: int
    fingerprint: str
    lam: Optional[float] = None

    @property
    def k(self) -> int:
        return self.F.shape[0]

    @property
    def eig_mean(self) -> float:
        return float(np.trace(self.F)) / self.k

    def save(self, path: Union[str, Path]) -> None:
        meta = {"k": self.k, "count": self.count, "fingerprint": self.fingerprint, "lambda": self.lam}
        write_container(path, HESSIAN_MAGIC, meta, {"F": self.F})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProjectedHessian":
        _, meta, arrays = read_container(path, HESSIAN_MAGIC)
        return cls(arrays["F"], meta["count"], meta["fingerprint"], meta.get("lambda"))


def accumulate_fp(store: GradientStore, block: int = SCAN_BLOCK) -> ProjectedHessian:
    """F = (1/N) sum_i g_i g_i^T in float64, symmetrised exactly"""
    if len(store) == 0:
        raise InvalidStateError(f"{store.path.name} holds no records")
    F = np.zeros((store.k, store.k))
    for _, G in store.iter_blocks(block):
        F += G.T @ G
    F /= len(store)
    F = 0.5 * (F + F.T)
    return ProjectedHessian(F, len(store), store.fingerprint)


def default_lambda(h: ProjectedHessian) -> float:
    """0.1 x mean eigenvalue of F (trace / k)"""
    return 0.1 * h.eig_mean


def lambda_grid(lam_star: float, points: int = 9, decades: float = 4.0) -> List[float]:
    return [float(v) for v in lam_star * np.logspace(-decades, decades, points)]


def solve_regularized(F: np.ndarray, lam: float, g: np.ndarray) -> np.ndarray:
    """y = (F + lam I)^{-1} g by Cholesky, falling back to an eigen-solve"""
    A = F + lam * np.eye(F.shape[0])
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True, check_finite=True), g)
    except linalg.LinAlgError:
        evals, evecs = linalg.eigh(A)
        floor = 1e-12 * max(float(np.trace(F)), 1.0)
        if evals.min() <= floor:
            raise NumericalError(f"F + lambda I is not positive definite at lambda={lam:g} "
                                 f"(smallest eigenvalue {evals.min():.3e}); increase lambda")
        logger.warning(f"Cholesky failed at lambda={lam:g}; solved through the eigendecomposition")
        return evecs @ ((evecs.T @ g) / evals.reshape((-1,) + (1,) * (np.ndim(g) - 1)))


class InfluenceReport(BaseModel):
    utility_descriptor: str
    scores: Dict[int, float]
    top_k: List[Tuple[int, float]]
    lambda_used: float
    default_lambda: float
    lambda_policy: str = "auto"
    config_fingerprint: str
    scope: Literal["global", "local"] = "global"
    metadata: Dict[str, Union[str, float, int, bool, None]] = Field(default_factory=dict)

    def ranked(self) -> List[Tuple[int, float]]:
        ids = np.fromiter(self.scores.keys(), dtype=np.int64)
        vals = np.fromiter(self.scores.values(), dtype=np.float64)
        order = np.lexsort((ids, -vals))
        return [(int(ids[i]), float(vals[i])) for i in order]

    def write_json(self, path: Union[str, Path]) -> None:
        from containers import atomic_write

        atomic_write(path, self.model_dump_json(indent=2).encode("utf-8"))

    @classmethod
    def read_json(cls, path: Union[str, Path]) -> "InfluenceReport":
        return cls.model_validate_json(Path(path).read_text())

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rank", "sample_id", "score"])
            for rank, (sid, score) in enumerate(self.ranked(), start=1):
                writer.writerow([rank, sid, repr(score)])


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> List[Tuple[int, float]]:
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def _check_fingerprints(store: GradientStore, h: ProjectedHessian, utility_fingerprint: Optional[str]) -> None:
    if h.fingerprint != store.fingerprint:
        raise ConfigurationError("projected Hessian", store.fingerprint, h.fingerprint)
    if utility_fingerprint is not None and utility_fingerprint != store.fingerprint:
        raise ConfigurationError("utility gradient", store.fingerprint, utility_fingerprint)


def score_influences(store: GradientStore, h: ProjectedHessian, g_utility: np.ndarray, lam: Optional[float] = None,
                     top_k: int = 10, descriptor: str = "", utility_fingerprint: Optional[str] = None,
                     lambda_policy: str = "auto", scope: str = "global") -> InfluenceReport:
    """Influence <(F + lam I)^{-1} g_utility, g_i> for every stored record"""
    _check_fingerprints(store, h, utility_fingerprint)
    g_utility = np.asarray(g_utility, dtype=np.float64)
    if g_utility.shape != (h.k,):
        raise InvalidArgumentError(f"utility gradient has shape {g_utility.shape}, expected ({h.k},)")
    lam_star = default_lambda(h)
    lam = lam_star if lam is None else float(lam)
    if lam < 0:
        raise InvalidArgumentError("lambda must be non-negative")
    y = solve_regularized(h.F, lam, g_utility)
    ids_parts, score_parts = [], []
    for ids, G in store.iter_blocks():
        ids_parts.append(ids)
        score_parts.append(G @ y)
    ids = np.concatenate(ids_parts) if ids_parts else np.zeros(0, dtype=np.int64)
    scores = np.concatenate(score_parts) if score_parts else np.zeros(0)
    require_finite(scores, "influence scores")
    return InfluenceReport(
        utility_descriptor=descriptor,
        scores={int(i): float(s) for i, s in zip(ids, scores)},
        top_k=_top_k(ids, scores, top_k),
        lambda_used=lam,
        default_lambda=lam_star,
        lambda_policy=lambda_policy,
        config_fingerprint=store.fingerprint,
        scope=scope,
    )


def lambda_sweep(store: GradientStore, h: ProjectedHessian, g_utility: np.ndarray, grid: Sequence[float],
                 top_k: int = 10, descriptor: str = "", utility_fingerprint: Optional[str] = None) -> Dict[float, InfluenceReport]:
    if not grid or any(v <= 0 for v in grid):
        raise InvalidArgumentError("lambda grid must be non-empty and positive")
    return {float(lam): score_influences(store, h, g_utility, lam, top_k, descriptor, utility_fingerprint, "sweep")
            for lam in grid}


# --- utility gradient files --------------------------------------------------------
@dataclass
class UtilityGradient:
    g_proj: np.ndarray
    descriptor: str
    fingerprint: str
    loss_kind: LossKind
    n_timesteps: int
    norm: float
    normalized: bool
    degenerate: bool = False

    @classmethod
    def from_aggregate(cls, projector: Projector, agg: AggregatedGradient, fingerprint: str) -> "UtilityGradient":
        return cls(project(projector, agg.g), agg.source, fingerprint, agg.loss_kind, agg.n_timesteps,
                   agg.norm, agg.normalized, agg.degenerate)

    def save(self, path: Union[str, Path]) -> None:
        meta = {
            "descriptor": self.descriptor,
            "fingerprint": self.fingerprint,
            "loss_kind": self.loss_kind.value,
            "n_timesteps": self.n_timesteps,
            "norm": self.norm,
            "normalized": self.normalized,
            "degenerate": self.degenerate,
        }
        write_container(path, UTILITY_MAGIC, meta, {"g_proj": self.g_proj})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "UtilityGradient":
        _, meta, arrays = read_container(path, UTILITY_MAGIC)
        return cls(arrays["g_proj"], meta["descriptor"], meta["fingerprint"], LossKind(meta["loss_kind"]),
                   meta["n_timesteps"], meta["norm"], meta["normalized"], meta.get("degenerate", False))
