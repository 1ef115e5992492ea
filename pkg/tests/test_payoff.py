import numpy as np
import pytest

from core.errors import PreconditionError, SpecificationError
from core.payoff import PayoffSpec, payoff_eval, payoff_gradient, payoff_values


def test_put_on_min():
    assert payoff_eval(PayoffSpec('put_on_min', strike=100.0), [90.0, 120.0]) == 10.0


def test_call_on_max_out_of_the_money():
    assert payoff_eval(PayoffSpec('call_on_max', strike=100.0), [90.0, 95.0]) == 0.0


def test_spread():
    assert payoff_eval(PayoffSpec('spread', strike=5.0), [110.0, 90.0]) == 15.0


def test_spread_needs_two_assets():
    with pytest.raises(SpecificationError):
        payoff_eval(PayoffSpec('spread', strike=5.0), [110.0, 90.0, 80.0])


def test_basket_and_multi_strike():
    basket = PayoffSpec('basket_put', strike=100.0, weights=(0.5, 0.5))
    assert payoff_eval(basket, [80.0, 100.0]) == pytest.approx(10.0)
    index_call = PayoffSpec('basket_call', strike=100.0, weights=(0.5, 0.5))
    assert payoff_eval(index_call, [120.0, 100.0]) == pytest.approx(10.0)
    multi = PayoffSpec('multi_strike', strikes=(100.0, 50.0))
    assert payoff_eval(multi, [105.0, 60.0]) == pytest.approx(10.0)


def test_zero_payoff_is_zero_everywhere():
    S = np.random.default_rng(0).uniform(1.0, 200.0, size=(50, 3))
    assert np.all(payoff_values(PayoffSpec('zero'), S) == 0.0)


def test_positive_prices_required():
    with pytest.raises(PreconditionError):
        payoff_eval(PayoffSpec('put_on_min', strike=100.0), [0.0, 10.0])


def test_unknown_kind_and_missing_weights():
    with pytest.raises(SpecificationError):
        PayoffSpec('digital', strike=1.0)
    with pytest.raises(SpecificationError):
        PayoffSpec('basket_put', strike=1.0)


@pytest.mark.parametrize("payoff", [
    PayoffSpec('put_on_min', strike=100.0),
    PayoffSpec('call_on_max', strike=100.0),
    PayoffSpec('spread', strike=5.0),
    PayoffSpec('basket_put', strike=100.0, weights=(0.3, 0.7)),
    PayoffSpec('basket_call', strike=100.0, weights=(0.6, 0.4)),
    PayoffSpec('multi_strike', strikes=(90.0, 110.0)),
])
def test_convex_nonnegative_and_lipschitz(payoff):
    rng = np.random.default_rng(42)
    S = rng.uniform(20.0, 200.0, size=(10000, 2))
    S_tilde = rng.uniform(20.0, 200.0, size=(10000, 2))
    lam = rng.uniform(0.0, 1.0, size=10000)

    a = payoff_values(payoff, S)
    b = payoff_values(payoff, S_tilde)
    mixed = payoff_values(payoff, lam[:, None] * S + (1.0 - lam[:, None]) * S_tilde)
    assert np.all(a >= 0.0)
    assert np.all(mixed <= lam * a + (1.0 - lam) * b + 1e-9)
    assert np.all(np.abs(a - b) <= payoff.lipschitz * np.linalg.norm(S - S_tilde, axis=-1) + 1e-9)


def test_natural_lipschitz_constants():
    assert PayoffSpec('put_on_min', strike=1.0).lipschitz == 1.0
    assert PayoffSpec('spread').lipschitz == pytest.approx(np.sqrt(2.0))
    assert PayoffSpec('basket_put', strike=1.0, weights=(3.0, 4.0)).lipschitz == pytest.approx(5.0)
    assert PayoffSpec('zero').lipschitz == 0.0


@pytest.mark.parametrize("payoff", [
    PayoffSpec('put_on_min', strike=100.0),
    PayoffSpec('call_on_max', strike=100.0),
    PayoffSpec('basket_put', strike=100.0, weights=(0.3, 0.7)),
])
def test_gradient_matches_finite_differences_away_from_kinks(payoff):
    S = np.array([[80.0, 95.0], [130.0, 60.0], [40.0, 70.0]])
    grad = payoff_gradient(payoff, S)
    h = 1e-6
    for i in range(2):
        bump = np.zeros(2)
        bump[i] = h
        fd = (payoff_values(payoff, S + bump) - payoff_values(payoff, S - bump)) / (2 * h)
        assert grad[:, i] == pytest.approx(fd, abs=1e-6)


def test_from_config_normalises_kind():
    payoff = PayoffSpec.from_config({'kind': ' Put_On_Min ', 'strike': 90})
    assert payoff.kind == 'put_on_min'
    assert payoff.to_config()['strike'] == 90.0
