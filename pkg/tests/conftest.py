import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from turbotrain.model import ModelConfig, prepare_scene  # noqa: E402
from turbotrain.scene import ScenarioConfig, generate_scene  # noqa: E402
from turbotrain.voxel import VoxelSpec  # noqa: E402

MINI = ModelConfig(
    spec=VoxelSpec(x_range=(-6.4, 6.4), y_range=(-3.2, 3.2), bev_cell=1.6),
    t_frames=2, t_fut=2, enc_hidden=4, channels=3, neck_kernel=3, neck_channels=4, head_hidden=3,
)


def mini_scene(seed: int, n_agents: int = 2, n_objects: int = 3, cfg: ModelConfig = MINI, **kw):
    sc = ScenarioConfig(n_agents=n_agents, n_objects=n_objects, x_extent=(-8.0, 8.0), y_extent=(-5.5, 5.5),
                        rays=200, t_hist=cfg.t_frames, t_fut=cfg.t_fut, min_spacing=4.5, min_range=1.0,
                        range_limit=15.0, seed=seed, **kw)
    return prepare_scene(generate_scene(sc), cfg)


@pytest.fixture(scope="session")
def mini_scenes():
    return [mini_scene(s) for s in range(4)]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
