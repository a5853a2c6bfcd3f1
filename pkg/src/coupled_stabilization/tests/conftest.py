import textwrap

import numpy as np
import pytest

from coupled_stabilization.assembly import assemble_block_system
from coupled_stabilization.config import ExperimentConfig, ModelParams
from coupled_stabilization.mesh import ControlRegion, build_unit_square_mesh


def hat_at_center(x1, x2):
    """Hat function of the single interior node of the level-1 mesh."""
    u = (np.asarray(x1) - 0.5) / 0.5
    v = (np.asarray(x2) - 0.5) / 0.5
    return np.maximum(0.0, 1.0 - np.maximum.reduce([np.abs(u), np.abs(v), np.abs(u - v)]))


@pytest.fixture
def params():
    return ModelParams.example()


@pytest.fixture(scope="session")
def level3_system():
    mesh = build_unit_square_mesh(3)
    return assemble_block_system(mesh, ModelParams.example(), ControlRegion.full(mesh))


@pytest.fixture(scope="session")
def level4_system():
    mesh = build_unit_square_mesh(4)
    return assemble_block_system(mesh, ModelParams.example(), ControlRegion.full(mesh))


@pytest.fixture
def small_config(tmp_path):
    """Coarse, short-horizon configuration writing into a temporary directory."""
    return ExperimentConfig(
        levels=[2, 3], dt=1e-3, t_final=0.05, eval_time=0.02, output_dir=tmp_path / "out"
    )


@pytest.fixture
def write_ini(tmp_path):
    """Write an INI file from a dedented string and return its path."""

    def _write(text: str, name: str = "experiment.ini"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(text))
        return path

    return _write
