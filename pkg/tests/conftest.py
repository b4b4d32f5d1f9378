import numpy as np
import pytest
import torch

from wsmoco.losses import ContrastBatch
from wsmoco.synthetic import CohortSpec, generate_cohort

torch.set_num_threads(1)

# (criterion number, line) pairs filled by test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def unit_rows(rng: np.random.Generator, n: int, d: int) -> torch.Tensor:
    z = rng.normal(size=(n, d))
    return torch.from_numpy(z / np.linalg.norm(z, axis=1, keepdims=True))


def random_query_batch(rng: np.random.Generator, b=None, q=None, d=None, n_labels=2) -> ContrastBatch:
    """Double-precision queries plus a queue, labels in {0..n_labels-1}, weights in kg."""
    b = b or int(rng.integers(2, 9))
    q = q if q is not None else int(rng.integers(0, 32 - b + 1))
    d = d or int(rng.integers(2, 9))
    z = unit_rows(rng, b + q, d)
    labels = torch.from_numpy(rng.integers(0, n_labels, b + q))
    weights = torch.from_numpy(rng.normal(60.0, 3.0, b + q))
    return ContrastBatch.from_queries(z[:b], labels[:b], weights[:b], z[b:], labels[b:], weights[b:])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Three patients (two downstream-sized), 32 px images, a few frames per session."""
    spec = CohortSpec(n_patients=3, patient_days=(3, 4, 4), frames_per_session=3, image_size=32, seed=5,
                      post_missing_prob=0.0)
    out = tmp_path_factory.mktemp("cohort")
    manifest = generate_cohort(spec, out)
    return spec, out, manifest


@pytest.fixture(scope="session")
def small_data(small_cohort):
    from wsmoco.dataset import prepare_images
    from wsmoco.preprocessing import CropConfig

    _, out, manifest = small_cohort
    data, _ = prepare_images(manifest, out / "landmarks.json", CropConfig(32), yaw_tol=10.0, mouth_tol=10.0)
    return data


@pytest.fixture(scope="session")
def quick_ctx():
    from wsmoco.crossval import RunContext
    from wsmoco.downstream import FinetuneConfig
    from wsmoco.network import EncoderConfig
    from wsmoco.preprocessing import CropConfig

    return RunContext(FinetuneConfig(epochs=1, batch_size=8), EncoderConfig.tiny(32, 8), crop=CropConfig(32), seed=3)


TINY_TOML = """
seed = 5
[cohort]
day_threshold = 4
[synthetic]
n_patients = 4
patient_days = [3, 3, 4, 4]
walk_sd_kg = []
frames_per_session = 3
image_size = 32
post_missing_prob = 0.0
[preprocessing]
output_size = 32
yaw_tol = 10.0
mouth_tol = 10.0
[network]
backbone = "tiny-cnn"
repr_dim = 8
proj_hidden = 8
proj_dim = 4
[pretrain]
epochs = 1
batch_size = 8
queue_size = 32
momentum = 0.9
[downstream]
epochs = 1
batch_size = 8
[evaluation]
max_folds = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path
