import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, DecompositionError, OracleSizeError
from .snell_engine import (FiniteTree, SnellDecomposition, TreeProcess, check_predictable, conditional_expectation,
                           decompose, enumerate_stopping_value, martingale_violation, supermartingale_violation,
                           tree_to_dict, uniqueness_probe, verify_representation)

CHECKS = (
    'majorant',
    'supermartingale',
    'snell_recursion',
    'martingale',
    'reconstruction',
    'compensator_predictable',
    'compensator_nonincreasing',
    'c_equals_b',
    'representation',
    'future_sup_recursion',
    'stopping_oracle',
    'submartingale_corollary',
    'uniqueness',
)


def random_probabilities(rng, count, max_denominator=64):
    """`count` positive rationals with a common denominator <= max_denominator summing to 1"""
    if count == 1:
        return [Fraction(1)]
    den = int(rng.integers(count, max_denominator + 1))
    cuts = np.sort(rng.choice(np.arange(1, den), size=count - 1, replace=False))
    parts = np.diff(np.concatenate(([0], cuts, [den])))
    return [Fraction(int(k), den) for k in parts]


def random_rational(rng, bound=8, max_denominator=16):
    """Rational in [-bound, bound] with denominator <= max_denominator"""
    den = int(rng.integers(1, max_denominator + 1))
    return Fraction(int(rng.integers(-bound * den, bound * den + 1)), den)


def random_tree(rng, depth, max_branching=3, max_denominator=64):
    """Tree of the given depth whose non-terminal nodes have 1..max_branching children"""
    parents = [None]
    probs = [Fraction(1)]
    frontier = [0]
    for _ in range(depth):
        nxt = []
        for node in frontier:
            count = int(rng.integers(1, max_branching + 1))
            for prob in random_probabilities(rng, count, max_denominator):
                parents.append(node)
                probs.append(prob)
                nxt.append(len(parents) - 1)
        frontier = nxt
    return FiniteTree(parents, probs)


def has_branching(tree):
    return any(len(kids) >= 2 for kids in tree.children)


def branching_tree(rng, depth, max_branching=3):
    """
    random_tree redrawn until some node has two or more children

    Returns:
        FiniteTree or None: None when max_branching < 2, where no such tree exists
    """
    if max_branching < 2:
        return None
    while True:
        tree = random_tree(rng, max(1, depth), max_branching)
        if has_branching(tree):
            return tree


def random_process(rng, tree):
    return TreeProcess(tree, [random_rational(rng) for _ in range(tree.size)])


def random_submartingale(rng, tree):
    """Children are shifted so each conditional mean exceeds its parent by a random slack >= 0"""
    values = [random_rational(rng) for _ in range(tree.size)]
    for level in tree.levels[:-1]:
        for node in level:
            kids = tree.children_of(node)
            mean = sum((p * values[c] for c, p in kids), Fraction(0))
            slack = abs(random_rational(rng, bound=1))
            shift = values[node] - mean + slack
            for c, _ in kids:
                values[c] += shift
    return TreeProcess(tree, values)


def martingale_perturbation(rng, tree):
    """
    Nonzero martingale N with N_0 = 0 built at one branching node

    Each child subtree of the chosen node is shifted by d_c with sum p_c d_c = 0.

    Returns:
        TreeProcess or None: None when the tree has no node with two or more children
    """
    branching = [node for node, kids in enumerate(tree.children) if len(kids) >= 2]
    if not branching:
        return None
    node = branching[int(rng.integers(len(branching)))]
    kids = tree.children[node]

    while True:
        shifts = [random_rational(rng, bound=2) for _ in kids[:-1]]
        if any(shifts):
            break
    last_prob = tree.probs[kids[-1]]
    shifts.append(-sum((tree.probs[c] * d for c, d in zip(kids, shifts)), Fraction(0)) / last_prob)

    values = [Fraction(0)] * tree.size
    for c, d in zip(kids, shifts):
        for v in tree.subtree(c):
            values[v] = d
    return TreeProcess(tree, values)


@dataclass(frozen=True)
class CampaignSettings:
    trees: int = 1000
    min_depth: int = 1
    max_depth: int = 6
    max_branching: int = 3
    seed: int = 0
    probes_per_tree: int = 10
    oracle_max_depth: int = 4
    oracle_max_stopping_times: int = 20000
    workers: int = 1
    fault_injection: bool = False
    min_perturbed_probes: int = 0

    def __post_init__(self):
        if self.trees < 0:
            raise ConfigError(f"Tree count must be nonnegative, got {self.trees}")
        if not 0 <= self.min_depth <= self.max_depth:
            raise ConfigError(f"Depth range [{self.min_depth}, {self.max_depth}] is invalid")
        if self.max_branching < 1:
            raise ConfigError(f"Branching must be at least 1, got {self.max_branching}")
        if self.min_perturbed_probes < 0:
            raise ConfigError(f"Probe target must be nonnegative, got {self.min_perturbed_probes}")
        if self.probes_per_tree < 0:
            raise ConfigError(f"Probe count must be nonnegative, got {self.probes_per_tree}")

    @classmethod
    def from_config(cls, section):
        if section.get('seed') is None:
            raise ConfigError("Section [campaign] needs a seed")
        try:
            return cls(
                trees=int(section.get('trees', 1000)),
                min_depth=int(section.get('min_depth', 1)),
                max_depth=int(section.get('max_depth', 6)),
                max_branching=int(section.get('max_branching', 3)),
                seed=int(section['seed']),
                probes_per_tree=int(section.get('probes_per_tree', 10)),
                oracle_max_depth=int(section.get('oracle_max_depth', 4)),
                oracle_max_stopping_times=int(section.get('oracle_max_stopping_times', 20000)),
                workers=int(section.get('workers') or 1),
                fault_injection=bool(section.get('fault_injection', False)),
                min_perturbed_probes=int(section.get('min_perturbed_probes', 0)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid [campaign] value: {e}") from e


@dataclass
class TreeOutcome:
    index: int
    nodes: int
    depth: int
    counts: Dict[str, int] = field(default_factory=dict)
    violations: List[Dict] = field(default_factory=list)
    witness: Optional[Dict] = None

    def record(self, check, ok, node=None, detail=""):
        self.counts[check] = self.counts.get(check, 0) + 1
        if not ok:
            self.violations.append({'tree': self.index, 'check': check, 'node': node, 'detail': detail})


@dataclass
class CampaignResult:
    settings: CampaignSettings
    trees: int = 0
    nodes: int = 0
    counts: Dict[str, int] = field(default_factory=dict)
    oracle_skipped: int = 0
    predictable_probes: int = 0
    perturbed_probes: int = 0
    redrawn_probe_trees: int = 0
    violations: List[Dict] = field(default_factory=list)
    witness: Optional[Dict] = None

    @property
    def ok(self):
        return not self.violations

    @property
    def probe_shortfall(self):
        """Perturbed probes still missing from the configured minimum"""
        return max(0, self.settings.min_perturbed_probes - self.perturbed_probes)

    def to_dict(self):
        return {
            'trees': self.trees,
            'nodes': self.nodes,
            'checks': {name: self.counts.get(name, 0) for name in CHECKS},
            'oracle_skipped': self.oracle_skipped,
            'predictable_probes': self.predictable_probes,
            'perturbed_probes': self.perturbed_probes,
            'redrawn_probe_trees': self.redrawn_probe_trees,
            'violations': len(self.violations),
            'violation_details': self.violations,
            'config': {
                'seed': self.settings.seed,
                'min_depth': self.settings.min_depth,
                'max_depth': self.settings.max_depth,
                'max_branching': self.settings.max_branching,
                'probes_per_tree': self.settings.probes_per_tree,
                'min_perturbed_probes': self.settings.min_perturbed_probes,
            },
        }


def _direct_future_supremum(X, M, node):
    return max(X.values[v] - M.values[v] for v in X.tree.subtree(node))


def _first(nodes):
    return next(iter(nodes), None)


def check_decomposition(decomp, outcome):
    """Record every exact identity of one decomposition into `outcome`"""
    X, Y, M, B, C = decomp.X, decomp.Y, decomp.M, decomp.B, decomp.C
    tree = X.tree

    bad = _first(v for v in range(tree.size) if Y.values[v] < X.values[v])
    outcome.record('majorant', bad is None, bad, "Y < X")

    bad = supermartingale_violation(Y)
    outcome.record('supermartingale', bad is None, bad, "E[Y_next] > Y")

    bad = _first(v for level in tree.levels[:-1] for v in level
                 if Y.values[v] != max(X.values[v], conditional_expectation(Y, v)))
    if bad is None:
        bad = _first(v for v in tree.levels[-1] if Y.values[v] != X.values[v])
    outcome.record('snell_recursion', bad is None, bad, "Y != max(X, E[Y_next])")

    bad = martingale_violation(M)
    if bad is None and M.values[0] != 0:
        bad = 0
    outcome.record('martingale', bad is None, bad, "M not a martingale started at 0")

    bad = _first(v for v in range(tree.size) if M.values[v] + B.values[v] != Y.values[v])
    outcome.record('reconstruction', bad is None, bad, "M + B != Y")

    predictable, pair = check_predictable(B)
    outcome.record('compensator_predictable', predictable, pair, "B differs across siblings")

    bad = _first(v for v in range(1, tree.size) if B.values[v] > B.values[tree.parents[v]])
    outcome.record('compensator_nonincreasing', bad is None, bad, "B increases")

    bad = C.first_difference(B)
    outcome.record('c_equals_b', bad is None, bad, "C != B")

    ok, bad = verify_representation(decomp)
    outcome.record('representation', ok, bad, "Y != M + C")

    bad = _first(v for v in range(tree.size) if C.values[v] != _direct_future_supremum(X, M, v))
    outcome.record('future_sup_recursion', bad is None, bad, "C != max over subtree of X - M")


def _inject_fault(decomp):
    """Corrupted compensator at the last node; used to exercise the violation path"""
    values = list(decomp.B.values)
    values[-1] += 1
    return SnellDecomposition(X=decomp.X, Y=decomp.Y, M=decomp.M, B=TreeProcess(decomp.B.tree, values), C=decomp.C)


def check_tree(index, settings):
    """
    Run every exact check on the index-th random tree of the campaign

    The tree, its processes and its probes come from the substream (seed, index), so
    outcomes do not depend on how trees are distributed over workers.
    """
    rng = np.random.default_rng([settings.seed, index])
    depth = int(rng.integers(settings.min_depth, settings.max_depth + 1))
    tree = random_tree(rng, depth, settings.max_branching)
    outcome = TreeOutcome(index=index, nodes=tree.size, depth=tree.depth)

    X = random_process(rng, tree)
    try:
        decomp = decompose(X)
    except DecompositionError as e:
        outcome.record('supermartingale', False, e.node, str(e))
        outcome.witness = tree_to_dict(X)
        return outcome
    if settings.fault_injection and index == 0:
        decomp = _inject_fault(decomp)
    check_decomposition(decomp, outcome)

    if tree.depth <= settings.oracle_max_depth:
        for node in range(tree.size):
            try:
                value = enumerate_stopping_value(X, node, max_stopping_times=settings.oracle_max_stopping_times)
            except OracleSizeError:
                outcome.counts['oracle_skipped'] = outcome.counts.get('oracle_skipped', 0) + 1
                continue
            outcome.record('stopping_oracle', value == decomp.Y.values[node], node,
                           f"oracle {value} != Y {decomp.Y.values[node]}")

    sub = decompose(random_submartingale(rng, tree))
    leaves = tree.levels[-1]
    path_prob = [Fraction(1)] * tree.size
    for v in range(1, tree.size):
        path_prob[v] = path_prob[tree.parents[v]] * tree.probs[v]
    expected_terminal = sum((path_prob[v] * sub.X.values[v] for v in leaves), Fraction(0))
    bad = _first(v for v in range(1, tree.size) if sub.C.values[v] != sub.C.values[tree.parents[v]])
    if bad is None and sub.C.values[0] != expected_terminal:
        bad = 0
    outcome.record('submartingale_corollary', bad is None, bad, "C not constant or C_0 != E[X_T]")

    verdict = uniqueness_probe(X, decomp.M, reference_M=decomp.M)
    outcome.record('uniqueness', verdict.is_predictable and verdict.equals_doob_meyer_M, None,
                   "Doob-Meyer martingale gave an unpredictable future supremum")
    probe_X, probe_M = X, decomp.M
    if settings.probes_per_tree and not has_branching(tree):
        # No nonzero martingale lives on this tree; probe a redrawn one instead
        redrawn = branching_tree(rng, tree.depth, settings.max_branching)
        if redrawn is not None:
            redrawn_X = random_process(rng, redrawn)
            outcome.counts['redrawn_probe_trees'] = 1
            try:
                redrawn_decomp = decompose(redrawn_X)
            except DecompositionError as e:
                outcome.record('supermartingale', False, e.node, f"redrawn probe tree: {e}")
                outcome.witness = tree_to_dict(redrawn_X)
                return outcome
            check_decomposition(redrawn_decomp, outcome)
            probe_X, probe_M = redrawn_X, redrawn_decomp.M
    probe_tree = probe_X.tree

    for _ in range(settings.probes_per_tree):
        N = martingale_perturbation(rng, probe_tree)
        if N is None:
            break
        eps = random_rational(rng, bound=1)
        if eps == 0:
            eps = Fraction(1)
        M_hat = TreeProcess(probe_tree, [m + eps * n for m, n in zip(probe_M.values, N.values)])
        verdict = uniqueness_probe(probe_X, M_hat, reference_M=probe_M)
        if verdict.is_predictable:
            outcome.counts['predictable_probes'] = outcome.counts.get('predictable_probes', 0) + 1
        outcome.counts['perturbed_probes'] = outcome.counts.get('perturbed_probes', 0) + 1
        outcome.record('uniqueness', not verdict.violates_uniqueness and not verdict.equals_doob_meyer_M,
                       None, "Predictable future supremum under a perturbed martingale")

    if outcome.violations:
        outcome.witness = tree_to_dict(X, decomp)
    return outcome


def run_campaign(settings, progress_callback=None):
    """
    Exact property campaign over seeded random trees

    Args:
        settings (CampaignSettings): Campaign parameters
        progress_callback (callable, optional): progress_callback(percentage, message) -> bool

    Returns:
        CampaignResult: Aggregated counts, violations and the first witness tree
    """
    result = CampaignResult(settings=settings)
    indices = range(settings.trees)

    def collect(outcome):
        result.trees += 1
        result.nodes += outcome.nodes
        for name, count in outcome.counts.items():
            if name == 'oracle_skipped':
                result.oracle_skipped += count
            elif name == 'predictable_probes':
                result.predictable_probes += count
            elif name == 'perturbed_probes':
                result.perturbed_probes += count
            elif name == 'redrawn_probe_trees':
                result.redrawn_probe_trees += count
            else:
                result.counts[name] = result.counts.get(name, 0) + count
        if outcome.violations:
            result.violations.extend(outcome.violations)
            if result.witness is None:
                result.witness = outcome.witness
                logging.error(f"Tree {outcome.index}: {outcome.violations[0]['check']} violated "
                              f"at node {outcome.violations[0]['node']}")
        if progress_callback and settings.trees:
            if not progress_callback(100.0 * result.trees / settings.trees, f"Checked tree {outcome.index}"):
                logging.info("Tree campaign stopped by request")
                return False
        return True

    if settings.workers > 1 and settings.trees > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            chunk = max(1, settings.trees // (4 * settings.workers))
            for outcome in pool.map(check_tree, indices, [settings] * settings.trees, chunksize=chunk):
                if not collect(outcome):
                    break
    else:
        for index in indices:
            if not collect(check_tree(index, settings)):
                break

    logging.info(f"Tree campaign: {result.trees} trees, {result.nodes} nodes, "
                 f"{sum(result.counts.values())} checks, violations: {len(result.violations)}")
    return result
