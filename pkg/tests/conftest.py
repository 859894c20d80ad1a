"""Shared fixtures: exactly consistent synthetic calibration tables."""

import numpy as np
import pytest

from src.stage_model import KAngleMode, StageParams, synthetic_table

F_FR = 7e9
V_FR = 0.4
I_FR = 1e-3
# Wide synthetic band so locking ranges never reach the table edges
F_GRID = np.linspace(5e9, 9e9, 9)


@pytest.fixture
def flat_params():
    """Constant amplitude laws: the extended system reduces to classic Adler."""
    return StageParams(
        a_vi=0.0,
        theta_vi_0=-45.0,
        g_m=0.0,
        i_osc_0=I_FR,
        theta_iv=45.0,
        c_load=100e-15,
        n_stages=2,
    )


@pytest.fixture
def sloped_params():
    """Mild amplitude-to-phase and amplitude-to-amplitude coupling around V_FR."""
    return StageParams(
        a_vi=-5.0,
        theta_vi_0=-45.0 + 5.0 * V_FR,
        g_m=2.5e-4,
        i_osc_0=I_FR - 2.5e-4 * V_FR,
        theta_iv=45.0,
        c_load=100e-15,
        n_stages=2,
    )


@pytest.fixture
def flat_table(flat_params):
    return synthetic_table(flat_params, F_GRID, V_FR)


@pytest.fixture
def sloped_table(sloped_params):
    return synthetic_table(sloped_params, F_GRID, V_FR)


@pytest.fixture
def flat_table_theta_iv(flat_params):
    params = flat_params.with_mode(KAngleMode.USE_THETA_IV)
    return synthetic_table(params, F_GRID, V_FR)
