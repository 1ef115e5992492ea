import math

import numpy as np
import pytest

from core.errors import CoefficientError, ConfigError, ModelValidationError, PreconditionError
from core.market_model import (Coefficient, MarketModel, check_ellipticity, check_hoelder, log_coefficients,
                               validate_model)


def test_log_coefficients_identity_volatility():
    model = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0, 0.0], volatility=np.eye(2))
    drift, vol = log_coefficients(model, 0.5, [0.0, 0.0])
    assert drift.tolist() == [-0.5, -0.5]
    assert np.array_equal(vol, np.eye(2))


def test_log_coefficients_dividend_cancels_rate():
    model = MarketModel.constant(r=0.07, T=1.0, dividends=[0.07, 0.07], volatility=np.eye(2))
    drift, _ = log_coefficients(model, 0.0, [1.0, -1.0])
    assert drift == pytest.approx([-0.5, -0.5], abs=1e-15)


def test_log_coefficients_two_assets_by_hand():
    model = MarketModel.constant(r=0.05, T=1.0, dividends=[0.01, 0.02], volatility=[[0.2, 0.0], [0.1, 0.2]])
    drift, vol = log_coefficients(model, 0.3, [4.6, 4.7])
    assert drift[0] == pytest.approx(0.05 - 0.01 - 0.02)
    assert drift[1] == pytest.approx(0.05 - 0.02 - 0.025)
    assert vol.shape == (2, 2)


def test_log_coefficients_rejects_time_outside_horizon(put_model):
    with pytest.raises(PreconditionError):
        log_coefficients(put_model, 1.5, [4.6])


def test_non_finite_coefficient_names_point():
    bad = Coefficient.from_callable(lambda t, x: np.full(x.shape[:-1], np.nan))
    model = MarketModel(n=1, r=0.0, T=1.0, dividends=(Coefficient.constant(0.0),), volatility=((bad,),))
    with pytest.raises(CoefficientError) as excinfo:
        log_coefficients(model, 0.25, [0.5])
    assert excinfo.value.t == 0.25
    assert excinfo.value.x == [0.5]


def test_ellipticity_identity_and_correlated():
    identity = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0, 0.0], volatility=np.eye(2))
    points = [(0.0, [0.0, 0.0]), (0.5, [1.0, -1.0])]
    assert check_ellipticity(identity, points) == pytest.approx(1.0)

    rho = 0.5
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    correlated = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0, 0.0], volatility=chol)
    assert check_ellipticity(correlated, points) == pytest.approx(0.5)


def test_ellipticity_matches_independent_eigenvalues():
    rng = np.random.default_rng(3)
    sigma = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
    model = MarketModel.constant(r=0.0, T=1.0, dividends=[0.0] * 3, volatility=sigma)
    expected = float(np.min(np.linalg.eigvals(sigma @ sigma.T).real))
    assert check_ellipticity(model, [(0.0, np.zeros(3))]) == pytest.approx(expected, rel=1e-10)


def test_ellipticity_needs_samples(put_model):
    with pytest.raises(PreconditionError):
        check_ellipticity(put_model, [])


def test_hoelder_constant_coefficients_is_zero(put_model):
    pairs = [((0.0, [4.0]), (0.5, [4.5])), ((0.1, [3.0]), (0.9, [5.0]))]
    assert check_hoelder(put_model, pairs) == 0.0


def test_hoelder_sine_volatility_bounded_by_lipschitz_constant():
    vol = Coefficient.from_config({'kind': 'sine', 'base': 0.2, 'amplitude': 0.1, 'axis': 0})
    model = MarketModel(n=1, r=0.0, T=1.0, dividends=(Coefficient.constant(0.0),), volatility=((vol,),))
    xs = np.linspace(-3.0, 3.0, 400)
    pairs = [((0.0, [a]), (0.0, [b])) for a, b in zip(xs, xs[1:])]
    value = check_hoelder(model, pairs)
    assert 0.09 < value <= 0.1 + 1e-12


def test_hoelder_sqrt_time_ratio():
    vol = Coefficient.from_config({'kind': 'sqrt_time', 'base': 0.2, 'amplitude': 0.1})
    model = MarketModel(n=1, r=0.0, T=1.0, dividends=(Coefficient.constant(0.0),), volatility=((vol,),))
    assert check_hoelder(model, [((0.64, [0.0]), (0.0, [0.0]))]) == pytest.approx(0.1)


def test_hoelder_skips_coincident_pairs(put_model):
    diagnostics = {}
    check_hoelder(put_model, [((0.5, [1.0]), (0.5, [1.0])), ((0.0, [1.0]), (1.0, [1.0]))], diagnostics)
    assert diagnostics == {'skipped': 1, 'evaluated': 1}


def test_validate_model_rejects_negative_dividend():
    model = MarketModel.constant(r=0.05, T=1.0, dividends=[-0.01], volatility=[[0.2]])
    with pytest.raises(ModelValidationError):
        validate_model(model, [(0.0, [4.6])])


def test_validate_model_rejects_declared_lambda_above_sampled():
    model = MarketModel.constant(r=0.05, T=1.0, dividends=[0.0], volatility=[[0.2]], ellipticity_bound=0.05)
    with pytest.raises(ModelValidationError):
        validate_model(model, [(0.0, [4.6])])


def test_validate_model_reports_worst_case(put_model):
    checks = validate_model(put_model, [(0.0, [4.6]), (1.0, [4.0])])
    assert checks['min_eigenvalue'] == pytest.approx(0.04)
    assert checks['samples'] == 2


def test_price_coefficients_compose_with_log():
    vol = Coefficient.from_config({'kind': 'affine', 'value': 0.2, 'slope': [0.01], 'lower': 0.05})
    model = MarketModel(n=1, r=0.0, T=1.0, dividends=(Coefficient.constant(0.01),), volatility=((vol,),))
    rng = np.random.default_rng(0)
    S = rng.uniform(10.0, 500.0, size=(1000, 1))
    assert np.array_equal(model.price_volatility(0.3, S), model.vol_fn(0.3, np.log(S)))


def test_table_coefficient_continues_end_values():
    table = Coefficient.from_config({'kind': 'table', 'axis': 't', 'knots': [0.0, 1.0], 'values': [0.1, 0.3]})
    values = table.evaluate(np.array([-1.0, 0.5, 2.0]), np.zeros((3, 1)))
    assert values == pytest.approx([0.1, 0.2, 0.3])


def test_from_config_builds_model_and_round_trips():
    config = {
        'model': {'n': 1, 'r': 0.03, 'T': 2.0, 'lambda': 0.01},
        'dividends': [0.01],
        'volatility': [[{'kind': 'sine', 'base': 0.25, 'amplitude': 0.05}]],
    }
    model = MarketModel.from_config(config)
    assert not model.is_constant
    again = MarketModel.from_config(model.to_config())
    assert again.to_config() == model.to_config()
    assert math.isclose(again.T, 2.0)


def test_from_config_reports_missing_volatility():
    with pytest.raises(ConfigError, match=r"\[volatility\]"):
        MarketModel.from_config({'model': {'n': 1, 'r': 0.0, 'T': 1.0}})


def test_unknown_coefficient_kind():
    with pytest.raises(ConfigError):
        Coefficient.from_config({'kind': 'cubic'})
