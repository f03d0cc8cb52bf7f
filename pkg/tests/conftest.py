import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from rams.scene_io import Band, ImageGrid, QualityMask, SceneRecord  # noqa: E402
from rams.synthetic import make_scene  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_scene():
    """12-frame 32x32 scene with HR, cheap enough for per-test use."""
    return make_scene(3, "small", Band.RED, n_frames=12, lr_size=32)


@pytest.fixture(scope="session")
def full_scene():
    return make_scene(11, "full", Band.RED, n_frames=10)


def scene_from_arrays(frames, masks, hr=None, hr_mask=None, scene_id="s", band=Band.RED):
    return SceneRecord(
        scene_id, band,
        [ImageGrid(np.asarray(f, dtype=np.uint16)) for f in frames],
        [QualityMask(np.asarray(m, dtype=bool)) for m in masks],
        None if hr is None else ImageGrid(np.asarray(hr, dtype=np.uint16)),
        None if hr_mask is None else QualityMask(np.asarray(hr_mask, dtype=bool)),
    )


def mask_with_clearance(shape, clearance, rng):
    n = int(round(clearance * shape[0] * shape[1]))
    flat = np.zeros(shape[0] * shape[1], bool)
    flat[rng.permutation(flat.size)[:n]] = True
    return flat.reshape(shape)
