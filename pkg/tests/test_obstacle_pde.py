import dataclasses

import numpy as np
import pytest

from core.errors import ExtrapolationError, PreconditionError, SolverError, UnsupportedModelError
from core.market_model import MarketModel
from core.obstacle_pde import (SpatialGrid, apply_L, complementarity_residual, eval_grad, eval_v, near_exercise,
                               solve_obstacle)
from core.oracles import black_scholes_price, crr_price
from core.payoff import PayoffSpec, payoff_values
from core.psor import PSORSettings
from core.sde_sim import TimeGrid, european_estimate, simulate


def test_grid_around_spot(put_model):
    grid = SpatialGrid.around(put_model, [100.0], 11, 4, margin=5.0)
    assert grid.shape == (11,)
    assert grid.x_nodes[0][5] == pytest.approx(np.log(100.0))
    assert grid.x_nodes[0][-1] - grid.x_nodes[0][0] == pytest.approx(2.0)
    assert grid.interior_indices.tolist() == list(range(1, 10))
    assert grid.boundary_indices.tolist() == [0, 10]


def test_grid_rejects_degenerate_inputs(put_model):
    with pytest.raises(PreconditionError):
        SpatialGrid.around(put_model, [100.0], 2, 4)
    with pytest.raises(PreconditionError):
        SpatialGrid.around(put_model, [100.0], 11, 0)
    with pytest.raises(PreconditionError):
        SpatialGrid.around(put_model, [-5.0], 11, 4)


def test_colors_partition_grid():
    model = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0, 0.0], volatility=np.eye(2) * 0.2)
    grid = SpatialGrid.around(model, [100.0, 100.0], 5, 2)
    colors = grid.colors()
    assert len(colors) == 4
    assert sorted(np.concatenate(colors).tolist()) == list(range(grid.size))


def test_zero_payoff_gives_zero_surface(zero_surface):
    assert np.all(zero_surface.values == 0.0)
    assert np.all(zero_surface.gradient == 0.0)
    assert eval_v(zero_surface, 0.0, [100.0]) == 0.0


def test_value_dominates_payoff(small_put_surface):
    psi = small_put_surface.payoff_layer
    assert np.all(small_put_surface.values >= psi[None, :] - 1e-12)


def test_put_gradient_stays_within_unit_slope(small_put_surface):
    grad = small_put_surface.gradient[0, 1:-1, 0]
    assert np.all(grad <= 1e-3)
    assert np.all(grad >= -1.0 - 1e-2)


def test_put_price_close_to_binomial(small_put_surface):
    value = eval_v(small_put_surface, 0.0, [100.0])
    reference = crr_price(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, steps=2000, option_type="put")
    assert value == pytest.approx(reference, rel=2e-2)
    assert value > black_scholes_price(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, "put")


def test_deep_in_the_money_put_is_exercised(small_put_surface):
    grid = small_put_surface.grid
    deep = int(np.argmin(np.abs(grid.x_nodes[0] - np.log(50.0))))
    assert small_put_surface.exercise_mask[0, deep]
    assert small_put_surface.values[0, deep] == pytest.approx(100.0 - np.exp(grid.x_nodes[0][deep]), abs=1e-8)


def test_call_without_dividends_matches_european():
    model = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0], volatility=[[0.2]])
    grid = SpatialGrid.around(model, [100.0], 121, 60, margin=5.0)
    surface = solve_obstacle(model, PayoffSpec('call_on_max', strike=100.0), grid, PSORSettings(ordering='red_black'))
    exact = black_scholes_price(100.0, 100.0, 0.0, 0.0, 0.2, 1.0, "call")
    assert eval_v(surface, 0.0, [100.0]) == pytest.approx(exact, rel=2e-2)


def test_terminal_layer_is_payoff(small_put_surface, put_payoff):
    S = np.array([[60.0], [100.0], [140.0]])
    assert eval_v(small_put_surface, 1.0, S) == pytest.approx(payoff_values(put_payoff, S), abs=1e-9)


def test_queries_outside_box_raise(small_put_surface):
    with pytest.raises(ExtrapolationError):
        eval_v(small_put_surface, 0.0, [1000.0])
    with pytest.raises(ExtrapolationError):
        eval_v(small_put_surface, 1.5, [100.0])
    with pytest.raises(ExtrapolationError):
        eval_grad(small_put_surface, 0.0, [1.0])


def test_query_dimension_mismatch(small_put_surface):
    with pytest.raises(PreconditionError):
        eval_v(small_put_surface, 0.0, [100.0, 100.0])


def test_three_assets_unsupported():
    model = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0] * 3, volatility=np.eye(3) * 0.2)
    grid = SpatialGrid.around(model, [100.0] * 3, 3, 1)
    with pytest.raises(UnsupportedModelError):
        solve_obstacle(model, PayoffSpec('put_on_min', strike=100.0), grid)


def test_complementarity_residual_is_small(small_put_surface, put_model):
    positive, continuation = complementarity_residual(small_put_surface, put_model)
    assert positive < 1e-5
    assert continuation < 1e-5


def test_apply_L_checks_shape_and_layer(small_put_surface, put_model):
    grid = small_put_surface.grid
    with pytest.raises(PreconditionError):
        apply_L(small_put_surface.values[:-1], grid, put_model, 0)
    with pytest.raises(PreconditionError):
        apply_L(small_put_surface.values, grid, put_model, grid.time_grid.steps)
    assert apply_L(small_put_surface.values, grid, put_model, 0).shape == grid.interior_indices.shape


def test_two_asset_orderings_agree():
    model = MarketModel.constant(r=0.05, T=0.5, dividends=[0.01, 0.02], volatility=[[0.2, 0.0], [0.1, 0.2]])
    payoff = PayoffSpec('put_on_min', strike=100.0)
    grid = SpatialGrid.around(model, [100.0, 100.0], 13, 6, margin=4.0)
    lex = solve_obstacle(model, payoff, grid, PSORSettings(omega=1.4, tolerance=1e-11))
    rb = solve_obstacle(model, payoff, grid, PSORSettings(omega=1.4, tolerance=1e-11, ordering='red_black'))
    assert np.allclose(lex.values, rb.values, atol=1e-7)
    assert np.all(lex.values >= lex.payoff_layer[None, :] - 1e-12)
    assert lex.report['psor']['total_iterations'] > 0


def test_progress_callback_can_stop(put_model, put_payoff):
    grid = SpatialGrid.around(put_model, [100.0], 21, 10)
    seen = []

    def stop_after_three(percentage, message):
        seen.append(percentage)
        return len(seen) < 3

    with pytest.raises(SolverError):
        solve_obstacle(put_model, put_payoff, grid, progress_callback=stop_after_three)
    assert len(seen) == 3


def test_frame_columns(small_put_surface):
    columns = small_put_surface.frame_columns()
    assert list(columns) == ['t', 'x1', 'S1', 'v', 'dv_dS1', 'exercised']
    assert len(columns['v']) == 41 * 81


def test_apply_L_on_known_functions():
    model = MarketModel.constant(r=0.05, T=1.0, dividends=[0.03], volatility=[[0.2]])
    grid = SpatialGrid.around(model, [100.0], 81, 40, margin=5.0)
    times = grid.time_grid.times
    S = grid.price_mesh[:, 0]
    interior = grid.interior_indices

    constant = np.full((times.size, grid.size), 7.0)
    assert apply_L(constant, grid, model, 3) == pytest.approx(np.full(interior.size, -0.05 * 7.0))

    # L S = -d S for the discounted-drift operator
    price = np.tile(S, (times.size, 1))
    assert apply_L(price, grid, model, 0) == pytest.approx(-0.03 * S[interior], rel=1e-3)

    # e^{rt} solves L f = 0 up to the forward time difference
    growth = np.exp(0.05 * times)[:, None] * np.ones(grid.size)
    assert np.max(np.abs(apply_L(growth, grid, model, 10))) < 1e-4


def test_eval_v_reproduces_nodes_and_multilinear_data(small_put_surface, zero_surface):
    grid = small_put_surface.grid
    times = grid.time_grid.times
    k, i = 10, 30
    node = [np.exp(grid.x_nodes[0][i])]
    assert eval_v(small_put_surface, times[k], node) == pytest.approx(small_put_surface.values[k, i], abs=1e-8)

    zg = zero_surface.grid
    x = zg.x_nodes[0]
    zt = zg.time_grid.times
    planar = dataclasses.replace(zero_surface, values=zt[:, None] + x[None, :])
    t_mid = 0.5 * (zt[3] + zt[4])
    x_mid = 0.5 * (x[12] + x[13])
    assert eval_v(planar, t_mid, [np.exp(x_mid)]) == pytest.approx(t_mid + x_mid, abs=1e-10)


def test_put_value_is_nonincreasing_in_time(small_put_surface):
    interior = small_put_surface.grid.interior_indices
    layers = small_put_surface.values[:, interior]
    assert np.all(np.diff(layers, axis=0) <= 1e-6)


@pytest.mark.slow
def test_zero_rate_call_matches_monte_carlo():
    model = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0], volatility=[[0.2]])
    call = PayoffSpec('call_on_max', strike=100.0)
    grid = SpatialGrid.around(model, [100.0], 201, 200, margin=5.0)
    surface = solve_obstacle(model, call, grid, PSORSettings(ordering='red_black'))
    bundle = simulate(model, [100.0], TimeGrid(0.0, 1.0, 1), 100000, seed=31, workers=4)
    mean, stderr = european_estimate(bundle, call, 0.0)
    assert abs(eval_v(surface, 0.0, [100.0]) - mean) < 3 * stderr + 0.01


@pytest.mark.slow
def test_put_price_within_half_percent_of_fine_binomial(put_model, put_payoff):
    grid = SpatialGrid.around(put_model, [100.0], 201, 500, margin=5.0)
    surface = solve_obstacle(put_model, put_payoff, grid, PSORSettings(ordering='red_black'))
    reference = crr_price(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, steps=10000, option_type="put")
    assert eval_v(surface, 0.0, [100.0]) == pytest.approx(reference, rel=5e-3)


def test_near_exercise_terminal_layer_and_regions(small_put_surface):
    assert near_exercise(small_put_surface, 1.0, [150.0])
    assert near_exercise(small_put_surface, 0.0, [50.0])
    assert not near_exercise(small_put_surface, 0.0, [150.0])
    flags = near_exercise(small_put_surface, np.array([0.0, 0.0]), np.array([[50.0], [150.0]]))
    assert flags.tolist() == [True, False]


def test_near_exercise_matches_node_scan(small_put_surface):
    grid = small_put_surface.grid
    tg = grid.time_grid
    x = grid.x_nodes[0]
    h = grid.spacing[0]
    rng = np.random.default_rng(12)
    t = rng.uniform(0.0, 1.0, 300)
    xs = rng.uniform(x[0], x[-1], 300)

    nodes_t = tg.times[:, None] * np.ones(x.size)
    nodes_x = np.ones(tg.times.size)[:, None] * x[None, :]
    close = ((np.abs(nodes_t[None] - t[:, None, None]) <= tg.dt * (1 + 1e-9))
             & (np.abs(nodes_x[None] - xs[:, None, None]) <= h * (1 + 1e-9)))
    expected = np.any(close & small_put_surface.exercise_mask[None], axis=(1, 2))

    got = near_exercise(small_put_surface, t, np.exp(xs)[:, None])
    assert got.tolist() == expected.tolist()
    assert 0 < expected.sum() < expected.size
