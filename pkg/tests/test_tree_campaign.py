from fractions import Fraction

import numpy as np
import pytest

from core.errors import ConfigError
from core.snell_engine import FiniteTree, conditional_expectation, decompose, martingale_violation
from core.tree_campaign import (CHECKS, CampaignSettings, TreeOutcome, branching_tree, check_decomposition,
                                check_tree, martingale_perturbation, random_probabilities, random_process,
                                random_submartingale, random_tree, run_campaign)


def test_random_probabilities_are_positive_and_sum_to_one():
    rng = np.random.default_rng(0)
    for count in (1, 2, 3, 5):
        probs = random_probabilities(rng, count)
        assert len(probs) == count
        assert sum(probs) == 1
        assert all(p > 0 for p in probs)


def test_random_tree_depth_and_branching():
    rng = np.random.default_rng(1)
    tree = random_tree(rng, 4, max_branching=3)
    assert tree.depth == 4
    assert all(1 <= len(kids) <= 3 for node, kids in enumerate(tree.children) if tree.times[node] < 4)


def test_random_submartingale_is_a_submartingale():
    rng = np.random.default_rng(2)
    tree = random_tree(rng, 4)
    X = random_submartingale(rng, tree)
    for level in tree.levels[:-1]:
        for node in level:
            assert conditional_expectation(X, node) >= X.values[node]


def test_martingale_perturbation_is_a_nonzero_martingale():
    rng = np.random.default_rng(3)
    tree = FiniteTree.binary(3, Fraction(1, 3))
    N = martingale_perturbation(rng, tree)
    assert N.values[0] == 0
    assert martingale_violation(N) is None
    assert any(N.values)


def test_martingale_perturbation_needs_a_branching_node():
    assert martingale_perturbation(np.random.default_rng(0), FiniteTree.deterministic(3)) is None


def test_branching_tree_always_branches():
    rng = np.random.default_rng(6)
    for depth in (0, 1, 3):
        tree = branching_tree(rng, depth, max_branching=2)
        assert tree.depth == max(1, depth)
        assert martingale_perturbation(rng, tree) is not None
    assert branching_tree(rng, 3, max_branching=1) is None


def test_every_tree_contributes_its_perturbed_probes():
    # one-level trees with up to three children: about a third have no branching node
    settings = CampaignSettings(trees=12, min_depth=0, max_depth=1, seed=3, probes_per_tree=2,
                                min_perturbed_probes=24)
    result = run_campaign(settings)
    assert result.ok
    assert result.perturbed_probes == 24
    assert result.redrawn_probe_trees > 0
    assert result.probe_shortfall == 0
    assert result.to_dict()['checks']['uniqueness'] == 12 + 24


def test_probe_shortfall_without_branching():
    result = run_campaign(CampaignSettings(trees=3, max_depth=2, max_branching=1, seed=4, probes_per_tree=5,
                                           min_perturbed_probes=1))
    assert result.ok
    assert result.perturbed_probes == 0
    assert result.probe_shortfall == 1


def test_correct_decomposition_passes_every_check():
    rng = np.random.default_rng(4)
    decomp = decompose(random_process(rng, random_tree(rng, 3)))
    outcome = TreeOutcome(index=0, nodes=decomp.X.tree.size, depth=3)
    check_decomposition(decomp, outcome)
    assert outcome.violations == []
    assert set(outcome.counts) <= set(CHECKS)


def test_single_tree_is_reproducible():
    settings = CampaignSettings(trees=1, seed=9, max_depth=4)
    first = check_tree(0, settings)
    second = check_tree(0, settings)
    assert first.counts == second.counts
    assert first.nodes == second.nodes


def test_small_campaign_has_no_violations():
    result = run_campaign(CampaignSettings(trees=25, min_depth=0, max_depth=4, seed=2024, probes_per_tree=3))
    summary = result.to_dict()
    assert result.ok
    assert summary['trees'] == 25
    assert summary['violations'] == 0
    assert summary['checks']['stopping_oracle'] > 0
    assert summary['checks']['uniqueness'] >= 25
    assert summary['predictable_probes'] == 0
    assert list(summary['checks']) == list(CHECKS)


def test_campaign_does_not_depend_on_workers():
    single = run_campaign(CampaignSettings(trees=12, max_depth=4, seed=5, probes_per_tree=2, workers=1))
    pooled = run_campaign(CampaignSettings(trees=12, max_depth=4, seed=5, probes_per_tree=2, workers=2))
    assert single.to_dict() == pooled.to_dict()


def test_fault_injection_produces_witness():
    result = run_campaign(CampaignSettings(trees=3, max_depth=3, seed=1, probes_per_tree=1, fault_injection=True))
    assert not result.ok
    assert result.violations[0]['tree'] == 0
    assert {v['check'] for v in result.violations} >= {'reconstruction'}
    assert 'nodes' in result.witness
    assert result.witness['nodes'][0]['b'] is not None


def test_progress_callback_stops_campaign():
    calls = []
    result = run_campaign(CampaignSettings(trees=10, max_depth=2, seed=3),
                          progress_callback=lambda pct, msg: calls.append(pct) or len(calls) < 4)
    assert result.trees == 4


def test_settings_from_config():
    settings = CampaignSettings.from_config({'seed': 7, 'trees': 10, 'max_depth': 3, 'workers': None})
    assert settings.seed == 7 and settings.trees == 10 and settings.workers == 1
    with pytest.raises(ConfigError):
        CampaignSettings.from_config({'trees': 10})
    with pytest.raises(ConfigError):
        CampaignSettings.from_config({'seed': 1, 'min_depth': 5, 'max_depth': 2})
    with pytest.raises(ConfigError):
        CampaignSettings.from_config({'seed': 1, 'trees': 'many'})


@pytest.mark.slow
def test_thousand_tree_campaign():
    result = run_campaign(CampaignSettings(trees=1000, max_depth=6, seed=2024, probes_per_tree=10, workers=4,
                                           min_perturbed_probes=10000))
    assert result.ok
    summary = result.to_dict()
    assert summary['perturbed_probes'] >= 10000
    assert result.probe_shortfall == 0
