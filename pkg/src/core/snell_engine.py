import math
import logging
import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from .errors import (DecompositionError, OracleSizeError, PreconditionError,
                     TreeMismatchError, UnsupportedModelError)
from .payoff import payoff_values
from .utils import Utils


class FiniteTree:
    """Finite probability tree; nodes are the atoms of the filtration at their time"""

    def __init__(self, parents, probs):
        """
        Args:
            parents (list): parents[k] is the parent id of node k (None for the root, node 0);
                every parent id must be smaller than its child's id
            probs (list): Branch probability of reaching node k from its parent (root: 1)
        """
        if not parents or parents[0] is not None:
            raise PreconditionError("Node 0 must be the root and have no parent")
        self.parents = tuple(parents)
        self.probs = tuple(Fraction(p) for p in probs)
        if len(self.probs) != len(self.parents):
            raise PreconditionError("One branch probability per node is required")

        size = len(self.parents)
        children = [[] for _ in range(size)]
        times = [0] * size
        for node in range(1, size):
            parent = self.parents[node]
            if parent is None or not 0 <= parent < node:
                raise PreconditionError(f"Node {node} has invalid parent {parent}")
            children[parent].append(node)
            times[node] = times[parent] + 1
        self.children = tuple(tuple(c) for c in children)
        self.times = tuple(times)
        self.depth = max(times)

        levels = [[] for _ in range(self.depth + 1)]
        for node, t in enumerate(times):
            levels[t].append(node)
        self.levels = tuple(tuple(level) for level in levels)
        self.rounding = None
        self._validate()

    def _validate(self):
        for node, kids in enumerate(self.children):
            if not kids:
                if self.times[node] != self.depth:
                    raise PreconditionError(f"Leaf {node} ends at time {self.times[node]}, horizon is {self.depth}")
                continue
            probs = [self.probs[c] for c in kids]
            if any(p <= 0 for p in probs):
                raise PreconditionError(f"Node {node} has a nonpositive branch probability")
            if sum(probs) != 1:
                raise PreconditionError(f"Branch probabilities at node {node} sum to {sum(probs)}, not 1")
        if self.probs[0] != 1:
            raise PreconditionError("Root probability must be 1")

    @classmethod
    def from_children(cls, child_probs):
        """Build breadth-first from a nested spec: each node is a list of (prob, subtree) pairs"""
        parents = [None]
        probs = [Fraction(1)]
        queue = [(0, child_probs)]
        while queue:
            node, spec = queue.pop(0)
            for prob, sub in spec:
                parents.append(node)
                probs.append(Fraction(prob))
                queue.append((len(parents) - 1, sub))
        return cls(parents, probs)

    @classmethod
    def deterministic(cls, depth):
        """Single path of the given depth"""
        return cls([None] + list(range(depth)), [1] * (depth + 1))

    @classmethod
    def binary(cls, depth, p_up=Fraction(1, 2)):
        """Full non-recombining binary tree; the first child of each node is the up move"""
        p_up = Fraction(p_up)
        parents = [None]
        probs = [Fraction(1)]
        frontier = [0]
        for _ in range(depth):
            nxt = []
            for node in frontier:
                for prob in (p_up, 1 - p_up):
                    parents.append(node)
                    probs.append(prob)
                    nxt.append(len(parents) - 1)
            frontier = nxt
        return cls(parents, probs)

    @property
    def size(self):
        return len(self.parents)

    def children_of(self, node):
        return tuple((c, self.probs[c]) for c in self.children[node])

    def subtree(self, node):
        """Node ids of the subtree rooted at `node`, the node included"""
        out = [node]
        stack = list(self.children[node])
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self.children[c])
        return out


class BinomialLattice:
    """Recombining binomial lattice; node (t, j) has j up-moves out of t"""

    def __init__(self, depth, p_up, rounding=None):
        self.depth = int(depth)
        self.p_up = Fraction(p_up)
        if not 0 < self.p_up < 1:
            raise PreconditionError(f"Up probability {self.p_up} outside (0, 1)")
        self.rounding = rounding
        self.times = tuple(t for t in range(self.depth + 1) for _ in range(t + 1))
        self.levels = tuple(tuple(range(self.index(t, 0), self.index(t, 0) + t + 1)) for t in range(self.depth + 1))

    @staticmethod
    def index(t, j):
        return t * (t + 1) // 2 + j

    @property
    def size(self):
        return (self.depth + 1) * (self.depth + 2) // 2

    def children_of(self, node):
        t = self.times[node]
        if t == self.depth:
            return ()
        j = node - self.index(t, 0)
        return ((self.index(t + 1, j + 1), self.p_up), (self.index(t + 1, j), 1 - self.p_up))


@dataclass(frozen=True, eq=False)
class TreeProcess:
    """One exact rational value per node; adapted by construction"""

    tree: object
    values: Tuple[Fraction, ...]

    def __post_init__(self):
        values = tuple(Fraction(v) for v in self.values)
        if len(values) != self.tree.size:
            raise PreconditionError(f"Process has {len(values)} values for {self.tree.size} nodes")
        object.__setattr__(self, 'values', values)

    def __getitem__(self, node):
        return self.values[node]

    def same_values(self, other):
        return self.tree is other.tree and self.values == other.values

    def first_difference(self, other):
        """First node where the two processes differ, or None"""
        for node, (a, b) in enumerate(zip(self.values, other.values)):
            if a != b:
                return node
        return None


@dataclass(frozen=True, eq=False)
class SnellDecomposition:
    """X with its Snell envelope Y = M + B and future supremum C"""

    X: TreeProcess
    Y: TreeProcess
    M: TreeProcess
    B: TreeProcess
    C: TreeProcess


@dataclass(frozen=True)
class ProbeVerdict:
    is_predictable: bool
    equals_doob_meyer_M: bool
    witness: Optional[Tuple[int, int]] = None

    @property
    def violates_uniqueness(self):
        return self.is_predictable and not self.equals_doob_meyer_M


def conditional_expectation(process, node):
    """E[P_{t+1} | node] for a non-terminal node"""
    return sum((p * process.values[c] for c, p in process.tree.children_of(node)), Fraction(0))


def _require_same_tree(*processes):
    tree = processes[0].tree
    if any(p.tree is not tree for p in processes[1:]):
        raise TreeMismatchError("Processes are defined on different trees")
    return tree


def _require_finite_tree(process, what):
    if not isinstance(process.tree, FiniteTree):
        raise UnsupportedModelError(f"{what} needs a non-recombining FiniteTree")


def snell_envelope(X):
    """Backward induction Y = max(X, E[Y_next]); lattices round continuation values"""
    tree = X.tree
    Y = list(X.values)
    for level in reversed(tree.levels[:-1]):
        for node in level:
            cont = sum((p * Y[c] for c, p in tree.children_of(node)), Fraction(0))
            if tree.rounding is not None:
                cont = round(cont, tree.rounding)
            Y[node] = max(X.values[node], cont)
    return TreeProcess(tree, Y)


def supermartingale_violation(Y):
    """First non-terminal node with E[Y_next | node] > Y_node, or None"""
    for level in Y.tree.levels[:-1]:
        for node in level:
            if conditional_expectation(Y, node) > Y.values[node]:
                return node
    return None


def martingale_violation(M):
    """First non-terminal node with E[M_next | node] != M_node, or None"""
    for level in M.tree.levels[:-1]:
        for node in level:
            if conditional_expectation(M, node) != M.values[node]:
                return node
    return None


def doob_meyer(Y):
    """
    Split a supermartingale Y into M + B with M_0 = 0 and B predictable nonincreasing

    Returns:
        tuple: (M, B) as TreeProcesses on Y's tree
    """
    _require_finite_tree(Y, "Doob-Meyer decomposition")
    bad = supermartingale_violation(Y)
    if bad is not None:
        raise DecompositionError(f"Y is not a supermartingale at node {bad}", node=bad)

    tree = Y.tree
    M = [Fraction(0)] * tree.size
    B = [Fraction(0)] * tree.size
    B[0] = Y.values[0]
    for level in tree.levels[:-1]:
        for node in level:
            expected = conditional_expectation(Y, node)
            drop = expected - Y.values[node]
            for c in tree.children[node]:
                B[c] = B[node] + drop
                M[c] = M[node] + (Y.values[c] - expected)
    return TreeProcess(tree, M), TreeProcess(tree, B)


def future_supremum(X, M):
    """C at a node = max of X - M over the subtree rooted there, by one backward sweep"""
    tree = _require_same_tree(X, M)
    _require_finite_tree(X, "The future supremum")
    C = [x - m for x, m in zip(X.values, M.values)]
    for level in reversed(tree.levels[:-1]):
        for node in level:
            for c in tree.children[node]:
                if C[c] > C[node]:
                    C[node] = C[c]
    return TreeProcess(tree, C)


def check_predictable(P):
    """
    Sibling-equality test of F_{t-1}-measurability

    Returns:
        tuple: (True, None) or (False, (node_a, node_b)) with two siblings that differ
    """
    _require_finite_tree(P, "The predictability check")
    for kids in P.tree.children:
        for a, b in zip(kids, kids[1:]):
            if P.values[a] != P.values[b]:
                return False, (a, b)
    return True, None


def decompose(X):
    """Snell envelope, Doob-Meyer split and future supremum of X in one call"""
    Y = snell_envelope(X)
    M, B = doob_meyer(Y)
    C = future_supremum(X, M)
    return SnellDecomposition(X=X, Y=Y, M=M, B=B, C=C)


def verify_representation(decomp):
    """Y = M + C at every node; returns (ok, first violating node or None)"""
    _require_same_tree(decomp.Y, decomp.M, decomp.C)
    for node, (y, m, c) in enumerate(zip(decomp.Y.values, decomp.M.values, decomp.C.values)):
        if y != m + c:
            return False, node
    return True, None


def uniqueness_probe(X, M_hat, reference_M=None):
    """
    Future supremum under a candidate martingale and its relation to the Doob-Meyer one

    Args:
        X (TreeProcess): Reward process
        M_hat (TreeProcess): Candidate martingale on X's tree
        reference_M (TreeProcess, optional): Doob-Meyer martingale of X when already known

    Raises:
        PreconditionError: if M_hat is not a martingale or M_hat_0 != 0
    """
    _require_same_tree(X, M_hat)
    _require_finite_tree(X, "The uniqueness probe")
    if M_hat.values[0] != 0:
        raise PreconditionError(f"Candidate martingale starts at {M_hat.values[0]}, not 0")
    bad = martingale_violation(M_hat)
    if bad is not None:
        raise PreconditionError(f"Candidate process is not a martingale at node {bad}")

    C_hat = future_supremum(X, M_hat)
    predictable, witness = check_predictable(C_hat)
    if reference_M is None:
        M, _ = doob_meyer(snell_envelope(X))
    else:
        _require_same_tree(X, reference_M)
        M = reference_M
    equals = M.same_values(M_hat)
    verdict = ProbeVerdict(is_predictable=predictable, equals_doob_meyer_M=equals, witness=witness)
    if verdict.violates_uniqueness:
        logging.error(f"Predictable future supremum under a non-Doob-Meyer martingale (first difference "
                      f"at node {M.first_difference(M_hat)})")
    return verdict


def count_stopping_times(tree, node, limit=None):
    """Number of stopping times of the subtree: N = 1 + prod N(child); stops early past `limit`"""
    memo = {}
    for v in reversed(tree.subtree(node)):
        kids = [c for c, _ in tree.children_of(v)]
        if not kids:
            memo[v] = 1
            continue
        total = 1
        for c in kids:
            total *= memo[c]
            if limit is not None and total > limit:
                total = limit + 1
                break
        memo[v] = 1 + total if limit is None or total <= limit else limit + 1
    return memo[node]


def enumerate_stopping_value(X, node, max_depth=12, max_stopping_times=200000):
    """
    Brute-force max of E[X_tau | node] over every stopping time of the subtree

    Each stopping time is a stop/continue marking of the subtree's nodes (leaves must stop);
    the set of achievable conditional values is enumerated exhaustively.
    """
    tree = X.tree
    _require_finite_tree(X, "Stopping-time enumeration")
    height = tree.depth - tree.times[node]
    if height > max_depth:
        raise OracleSizeError(f"Subtree at node {node} has height {height} > {max_depth}")
    count = count_stopping_times(tree, node, limit=max_stopping_times)
    if count > max_stopping_times:
        raise OracleSizeError(f"Subtree at node {node} has more than {max_stopping_times} stopping times")

    achievable = {}
    for v in reversed(tree.subtree(node)):
        outcomes = [X.values[v]]
        kids = tree.children_of(v)
        if kids:
            for combo in itertools.product(*(achievable[c] for c, _ in kids)):
                outcomes.append(sum((p * value for (_, p), value in zip(kids, combo)), Fraction(0)))
        achievable[v] = outcomes
    return max(achievable[node])


def optimal_stopping_nodes(decomp):
    """Nodes of the stopping region {Y = X}"""
    return [node for node, (y, x) in enumerate(zip(decomp.Y.values, decomp.X.values)) if y == x]


def tree_from_market(model, steps, S0, payoff, precision=12, recombining=True):
    """
    Discounted payoff process e^{-rt} psi(S_t) on a CRR tree

    Args:
        model (MarketModel): Must be one-dimensional with constant coefficients
        steps (int): Number of binomial steps over [0, T]
        S0 (float): Spot price
        payoff (PayoffSpec): Payoff
        precision (int): Decimal digits kept when rounding values and probabilities
        recombining (bool): Lattice (any step count) or full tree (steps <= 16)

    Returns:
        TreeProcess: X on the lattice or tree
    """
    if model.n != 1 or not model.is_constant:
        raise UnsupportedModelError("Market trees need a one-dimensional constant-coefficient model")
    if int(steps) < 1:
        raise PreconditionError(f"Market tree needs at least one step, got {steps}")
    div, vol = model.constant_coefficients()
    sigma = float(vol[0, 0])
    carry = model.r - float(div[0])
    dt = model.T / steps
    up = math.exp(abs(sigma) * math.sqrt(dt))
    down = 1.0 / up
    p_float = (math.exp(carry * dt) - down) / (up - down)
    p_up = round(Fraction(p_float), precision)
    if not 0 < p_up < 1:
        raise UnsupportedModelError(f"Risk-neutral probability {p_float} outside (0, 1); refine the tree")

    S0 = float(np.asarray(S0, dtype=float).reshape(-1)[0])

    def discounted_payoff(t, ups):
        price = S0 * up ** (2 * ups - t)
        value = math.exp(-model.r * t * dt) * float(payoff_values(payoff, np.array([price])))
        return round(Fraction(value), precision)

    if recombining:
        lattice = BinomialLattice(steps, p_up, rounding=precision)
        values = [discounted_payoff(t, j) for t in range(steps + 1) for j in range(t + 1)]
        logging.info(f"Built {steps}-step recombining market lattice ({lattice.size} nodes)")
        return TreeProcess(lattice, values)

    if steps > 16:
        raise OracleSizeError(f"A non-recombining tree with {steps} steps is too large")
    tree = FiniteTree.binary(steps, p_up)
    ups = [0] * tree.size
    for node in range(1, tree.size):
        parent = tree.parents[node]
        is_up = tree.children[parent][0] == node
        ups[node] = ups[parent] + (1 if is_up else 0)
    values = [discounted_payoff(tree.times[node], ups[node]) for node in range(tree.size)]
    return TreeProcess(tree, values)


def tree_to_dict(process, decomp=None):
    """
    JSON-ready dump: one record per node with id, parent, time, prob and value as "num/den"

    Decomposition dumps add y, m, b and c per node.
    """
    tree = process.tree
    if not isinstance(tree, FiniteTree):
        raise UnsupportedModelError("Only FiniteTree processes can be serialized node by node")
    nodes = []
    for node in range(tree.size):
        record = {
            'id': node,
            'parent': tree.parents[node],
            'time': tree.times[node],
            'prob': Utils.format_fraction(tree.probs[node]),
            'value': Utils.format_fraction(process.values[node]),
        }
        if decomp is not None:
            record['y'] = Utils.format_fraction(decomp.Y.values[node])
            record['m'] = Utils.format_fraction(decomp.M.values[node])
            record['b'] = Utils.format_fraction(decomp.B.values[node])
            record['c'] = Utils.format_fraction(decomp.C.values[node])
        nodes.append(record)
    return {'depth': tree.depth, 'nodes': nodes}


def tree_from_dict(data):
    """Rebuild the TreeProcess of a tree_to_dict dump"""
    try:
        records = sorted(data['nodes'], key=lambda r: int(r['id']))
        parents = [None if r['parent'] is None else int(r['parent']) for r in records]
        probs = [Utils.parse_fraction(r['prob']) for r in records]
        values = [Utils.parse_fraction(r['value']) for r in records]
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as e:
        raise PreconditionError(f"Malformed tree dump: {e}") from e
    return TreeProcess(FiniteTree(parents, probs), values)
