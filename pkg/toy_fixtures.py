"""Small models, schedules and finite-difference helpers shared by the test files"""

import tempfile
from pathlib import Path

import numpy as np

from config import InversionConfig, TrainingConfig, load_config
from diffusion_core import DataPoint, NoiseSchedule
from scorenet import ArchSpec, DenoiserModel

D_X = 6
N_CONCEPTS = 3


def tiny_schedule(T: int = 20) -> NoiseSchedule:
    return NoiseSchedule.linear_beta(T, 1e-3, 0.2)


def tiny_arch(d_x: int = D_X, n_concepts: int = N_CONCEPTS, hidden: int = 10, layers: int = 2) -> ArchSpec:
    return ArchSpec(d_x=d_x, n_concepts=n_concepts, hidden=hidden, n_hidden_layers=layers, time_dim=4)


def tiny_model(seed: int = 0, T: int = 20, **arch_kwargs) -> DenoiserModel:
    """Randomly initialised model with non-zero condition rows so every path carries signal"""
    return DenoiserModel.init(tiny_arch(**arch_kwargs), seed, tiny_schedule(T), zero_cond=False)


def tiny_dataset(n_per_concept: int = 4, d_x: int = D_X, n_concepts: int = N_CONCEPTS, seed: int = 0):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-0.6, 0.6, size=(n_concepts, d_x))
    data = []
    for k in range(n_concepts):
        for _ in range(n_per_concept):
            x0 = np.clip(centers[k] + 0.1 * rng.standard_normal(d_x), -1.0, 1.0)
            data.append(DataPoint(x0, k, 0, len(data)))
    return data


def quick_training(steps: int = 30) -> TrainingConfig:
    return TrainingConfig(steps=steps, batch_size=8, lr=1e-3, p_uncond=0.2, log_every=10)


def quick_inversion(steps: int = 20) -> InversionConfig:
    return InversionConfig(steps=steps, batch_size=2, lr=1e-2, init_scale=0.01)


class ConstantEpsModel:
    """Stand-in denoiser whose prediction ignores its input"""

    def __init__(self, eps: np.ndarray, schedule: NoiseSchedule, n_concepts: int = 1):
        self.e = np.asarray(eps, dtype=np.float64)
        self.schedule = schedule
        self.null_condition = (n_concepts,)

    def eps(self, x, t, cond):
        return np.broadcast_to(self.e, np.shape(x)).copy()


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function over every entry of x"""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def fd_in_place(f, array: np.ndarray, indices, h: float = 1e-6) -> np.ndarray:
    """Central differences of f() w.r.t. selected entries of an array that f reads in place"""
    g = np.zeros(len(indices))
    flat = array.reshape(-1)
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[n] = (up - down) / (2 * h)
    return g


def run_tests(tests) -> bool:
    """Minimal runner mirroring `python test_x.py`; pytest collects the same functions"""
    passed = 0
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"❌ {test.__name__}: {type(e).__name__}: {e}")
    print(f"\n📊 {passed}/{len(tests)} passed")
    return passed == len(tests)


TINY_TOML = """
schema_version = 1
seed = 3

[dataset]
n_shapes = 2
n_styles = 2
per_cell = 2
resolution = 8
max_shift = 0
n_exemplar_concepts = 1
exemplars_per_concept = 2

[schedule]
T = 20
ddim_steps = 4

[model]
hidden = 8
n_hidden_layers = 1
time_dim = 4

[training]
steps = 10
batch_size = 4
log_every = 5

[inversion]
steps = 5
batch_size = 2

[gradients]
n_timesteps = 2
n_trajectories = 1
utility_timesteps = 2

[projector]
k = 8
block_rows = 512

[attribution]
sweep_points = 3
sweep_decades = 1.0
top_k = 3

[benchmark]
n_tokens = 1
generations_per_token = 2
recall_at = [1]
sampling_steps = 4
sweep_baselines = false
include_dtrak = false
chart = false

[oracle]
n_shapes = 2
n_styles = 2
n_train = 4
max_samples = 8
training_steps = 5
n_generations = 2
reward_draws = 2
replicates = 2
"""


def write_tiny_config(directory, text: str = TINY_TOML) -> Path:
    path = Path(directory) / "tiny.toml"
    path.write_text(text)
    return path


def tiny_config():
    """Seconds-scale RunConfig for end-to-end tests"""
    with tempfile.TemporaryDirectory() as tmp:
        return load_config(write_tiny_config(tmp))
