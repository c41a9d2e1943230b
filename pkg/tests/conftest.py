import numpy as np
import pytest

from terraclust.core import PatchRecord
from terraclust.ingest import extract_dataset
from terraclust.metrics import split_train_test
from terraclust.synth import DatasetConfig, SceneConfig, generate_dataset


@pytest.fixture(scope="session")
def small_synth():
    """Two 512-px scenes with right-eye views and RSM partners."""
    cfg = DatasetConfig(n_scenes=2, scene=SceneConfig(image_size=512), seed=3, rsm_max_shift=0.08)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def small_patches(small_synth):
    ds = small_synth.dataset
    patches = extract_dataset(ds)
    return split_train_test(patches, {e.image_id: e.width for e in ds.images})


def make_patch(pid, row, col, size=8, image_id=0, **kw):
    return PatchRecord(pid, image_id, row, col, size, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_problem(small_synth, small_patches):
    """Features, constraints and truth for the two-scene dataset."""
    from terraclust.constraints import ConstraintConfig, RSMConfig, generate_constraints
    from terraclust.ingest import featurize_patches
    from terraclust.synth import patch_truth

    ds = small_synth.dataset
    X = featurize_patches(ds, small_patches)
    cfg = ConstraintConfig(rsm=RSMConfig(search_fraction=0.125))
    cons = generate_constraints(ds, small_patches, cfg).constraints
    return X, cons, patch_truth(small_synth, small_patches)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
