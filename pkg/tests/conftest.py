import sys
from pathlib import Path

import pytest

# Mirror run_app.py: modules import each other from src/
SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from core.market_model import MarketModel  # noqa: E402
from core.obstacle_pde import SpatialGrid, solve_obstacle  # noqa: E402
from core.payoff import PayoffSpec  # noqa: E402
from core.psor import PSORSettings  # noqa: E402
from core.sde_sim import TimeGrid, simulate  # noqa: E402

REPO = SRC.parent


@pytest.fixture(scope="session")
def repo_root():
    return REPO


@pytest.fixture(scope="session")
def put_model():
    return MarketModel.constant(r=0.05, T=1.0, dividends=[0.0], volatility=[[0.2]], ellipticity_bound=0.01)


@pytest.fixture(scope="session")
def put_payoff():
    return PayoffSpec(kind='put_on_min', strike=100.0)


@pytest.fixture(scope="session")
def small_put_surface(put_model, put_payoff):
    grid = SpatialGrid.around(put_model, [100.0], 81, 40, margin=5.0)
    return solve_obstacle(put_model, put_payoff, grid, PSORSettings(ordering='red_black'))


@pytest.fixture(scope="session")
def small_put_bundle(put_model):
    return simulate(put_model, [100.0], TimeGrid(0.0, 1.0, 40), 400, seed=1, workers=1)


@pytest.fixture(scope="session")
def zero_surface(put_model):
    grid = SpatialGrid.around(put_model, [100.0], 41, 20, margin=5.0)
    return solve_obstacle(put_model, PayoffSpec(kind='zero'), grid)
