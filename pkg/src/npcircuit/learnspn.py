"""Structure learning and parameter fitting for the probabilistic circuit.

Structure learning is a small LearnSPN-style recursion: try to split the
variable scope into groups whose cross-group mutual information stays below a
threshold (emit a product node), otherwise cluster the rows with hard EM over
products of categoricals (emit a sum node weighted by cluster sizes), and
bottom out in Laplace-smoothed categorical leaves.

Parameter fitting is the multiplicative concave-convex update for sum-edge
weights: each weight is scaled by its aggregated responsibility flow
w * sum_n dS/dS_i * S_j / S and renormalized per sum node. Leaf tables are
re-estimated from the same responsibilities. The data log-likelihood is
non-decreasing across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import circuit as pc
from .errors import DegenerateLikelihood, EmptyData
from .schema import VariableSchema

# Smoothing used when re-estimating leaves inside the multiplicative update.
# Kept tiny on purpose: a sizeable pseudocount turns the M-step into a MAP
# step whose raw-likelihood sequence is no longer monotone.
FIT_LEAF_SMOOTHING = 1e-12


@dataclass(frozen=True)
class StructureHyperparams:
    mi_threshold: float = 0.02  # nats
    n_clusters: int = 2
    em_iters: int = 10
    min_rows: int = 30
    laplace: float = 1.0
    seed: int = 0


def _leaf_from_rows(rows: np.ndarray, var: int, card: int, alpha: float) -> pc.CircuitNode:
    counts = np.bincount(rows[:, var], minlength=card).astype(np.float64)
    table = (counts + alpha) / (counts.sum() + alpha * card)
    return pc.make_leaf(var, table)


def _pairwise_mi(rows: np.ndarray, u: int, v: int, cards) -> float:
    """Empirical mutual information (nats) between two columns."""
    cu, cv = cards[u], cards[v]
    joint = np.bincount(rows[:, u] * cv + rows[:, v], minlength=cu * cv).astype(np.float64)
    joint = joint.reshape(cu, cv) / len(rows)
    pu = joint.sum(axis=1)
    pv = joint.sum(axis=0)
    nz = joint > 0
    outer = pu[:, None] * pv[None, :]
    return float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))


def _independent_groups(rows: np.ndarray, scope: list[int], cards, threshold: float):
    """Union-find grouping: variables joined when their MI reaches the threshold."""
    parent = {v: v for v in scope}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for i, u in enumerate(scope):
        for v in scope[i + 1 :]:
            if _pairwise_mi(rows, u, v, cards) >= threshold:
                parent[find(u)] = find(v)
    groups: dict[int, list[int]] = {}
    for v in scope:
        groups.setdefault(find(v), []).append(v)
    return [sorted(g) for g in sorted(groups.values())]


def _prototype_init(rows: np.ndarray, scope, k: int, rng) -> np.ndarray:
    """Farthest-point prototype seeding; assigns rows by Hamming distance.

    Symmetric random assignments collapse hard EM to a single cluster on
    strongly clustered data, so seed with maximally separated rows instead.
    """
    sub = rows[:, scope]
    protos = [int(rng.integers(0, len(rows)))]
    dist = np.sum(sub != sub[protos[0]], axis=1)
    while len(protos) < k:
        far = int(np.argmax(dist))
        protos.append(far)
        dist = np.minimum(dist, np.sum(sub != sub[far], axis=1))
    stacked = np.stack([np.sum(sub != sub[p], axis=1) for p in protos], axis=1)
    return np.argmin(stacked, axis=1)


def _hard_em_clusters(rows: np.ndarray, scope, cards, hp: StructureHyperparams, rng):
    """Hard EM over products of categoricals; returns row-index lists per cluster."""
    n = len(rows)
    k = min(hp.n_clusters, n)
    assign = _prototype_init(rows, scope, k, rng)
    for _ in range(hp.em_iters):
        log_lik = np.zeros((n, k))
        sizes = np.bincount(assign, minlength=k).astype(np.float64)
        for c in range(k):
            members = rows[assign == c]
            if len(members) == 0:
                log_lik[:, c] = -np.inf
                continue
            score = np.full(n, np.log(sizes[c] / n))
            for var in scope:
                counts = np.bincount(members[:, var], minlength=cards[var]).astype(np.float64)
                table = (counts + hp.laplace) / (counts.sum() + hp.laplace * cards[var])
                score = score + np.log(table)[rows[:, var]]
            log_lik[:, c] = score
        new_assign = np.argmax(log_lik, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    clusters = [np.flatnonzero(assign == c) for c in range(k)]
    return [c for c in clusters if len(c) > 0]


def learn_structure(
    data: np.ndarray, schema: VariableSchema, hp: StructureHyperparams | None = None
) -> pc.Circuit:
    """LearnSPN-style recursive structure learner over full (y, a_1..K) rows.

    ``data`` has shape (n, K+1) with the class in column 0. The returned
    circuit always validates; leaves are Laplace smoothed so no state gets
    exactly zero mass.
    """
    hp = hp or StructureHyperparams()
    data = np.asarray(data, dtype=np.int64)
    if data.ndim != 2 or data.shape[1] != schema.n_variables:
        raise ValueError("data must have one column per variable (class first)")
    if len(data) == 0:
        raise EmptyData("cannot learn structure from zero rows")
    cards = schema.cardinalities
    if np.any(data < 0) or np.any(data >= np.asarray(cards)[None, :]):
        raise ValueError("data values outside schema cardinalities")

    rng = np.random.default_rng(hp.seed)
    nodes: list[pc.CircuitNode] = []

    def emit(node: pc.CircuitNode) -> int:
        nodes.append(node)
        return len(nodes) - 1

    def factorized(rows: np.ndarray, scope: list[int]) -> int:
        leaf_ids = [emit(_leaf_from_rows(rows, var, cards[var], hp.laplace)) for var in scope]
        if len(leaf_ids) == 1:
            return leaf_ids[0]
        return emit(pc.make_product(tuple(leaf_ids), scope))

    def build(rows: np.ndarray, scope: list[int]) -> int:
        if len(scope) == 1:
            return emit(_leaf_from_rows(rows, scope[0], cards[scope[0]], hp.laplace))
        if len(rows) < hp.min_rows:
            return factorized(rows, scope)
        groups = _independent_groups(rows, scope, cards, hp.mi_threshold)
        if len(groups) > 1:
            child_ids = tuple(build(rows, g) for g in groups)
            return emit(pc.make_product(child_ids, scope))
        clusters = _hard_em_clusters(rows, scope, cards, hp, rng)
        for _ in range(3):
            if len(clusters) >= 2:
                break
            clusters = _hard_em_clusters(rows, scope, cards, hp, rng)
        if len(clusters) < 2:
            # Clustering cannot separate the rows; fall back to independence
            # so the recursion terminates.
            return factorized(rows, scope)
        child_ids = tuple(build(rows[idx], scope) for idx in clusters)
        weights = np.array([len(idx) for idx in clusters], dtype=np.float64)
        weights /= weights.sum()
        return emit(pc.make_sum(child_ids, weights, scope))

    root = build(data, list(range(schema.n_variables)))
    return pc.Circuit(schema=schema, nodes=tuple(nodes), root=root)


def _log_derivatives(circ: pc.Circuit, values: list[np.ndarray]) -> list[np.ndarray]:
    """Top-down log derivatives d(root)/d(node) for every node, per row."""
    n = values[0].shape[0]
    derivs: list[np.ndarray] = [np.full(n, -np.inf) for _ in circ.nodes]
    derivs[circ.root] = np.zeros(n)
    for idx in range(len(circ.nodes) - 1, -1, -1):
        node = circ.nodes[idx]
        if node.kind == pc.KIND_LEAF:
            continue
        d_parent = derivs[idx]
        if node.kind == pc.KIND_SUM:
            logw = pc._log(node.weights)
            for c, lw in zip(node.children, logw):
                derivs[c] = np.logaddexp(derivs[c], d_parent + lw)
        else:
            total = values[idx]
            for c in node.children:
                child_val = values[c]
                sibling = total - child_val
                bad = ~np.isfinite(child_val)
                if bad.any():
                    others = [o for o in node.children if o != c]
                    if others:
                        sibling_bad = np.sum([values[o][bad] for o in others], axis=0)
                    else:
                        sibling_bad = np.zeros(int(bad.sum()))
                    sibling = sibling.copy()
                    sibling[bad] = sibling_bad
                derivs[c] = np.logaddexp(derivs[c], d_parent + sibling)
    return derivs


def fit_parameters_cccp(circ: pc.Circuit, data: np.ndarray, iters: int = 30):
    """Multiplicative weight updates plus responsibility-based leaf refits.

    Returns ``(circuit, log_likelihoods)`` where the history holds the mean
    per-row log-likelihood before each iteration and after the last one
    (length ``iters + 1``); the sequence is non-decreasing up to 1e-8.
    """
    data = np.asarray(data, dtype=np.int64)
    if len(data) == 0:
        raise EmptyData("cannot fit parameters on zero rows")
    nodes = list(circ.nodes)
    history = []
    for _ in range(iters):
        current = pc.Circuit(schema=circ.schema, nodes=tuple(nodes), root=circ.root)
        values = pc.all_node_log_values(current, data)
        root_val = values[circ.root]
        if np.any(root_val < pc.LOG_TINY):
            raise DegenerateLikelihood("a training row has numerically zero likelihood")
        history.append(float(np.mean(root_val)))
        derivs = _log_derivatives(current, values)
        new_nodes: list[pc.CircuitNode] = []
        for idx, node in enumerate(nodes):
            if node.kind == pc.KIND_PRODUCT:
                new_nodes.append(node)
            elif node.kind == pc.KIND_SUM:
                flows = np.empty(len(node.children))
                for j, c in enumerate(node.children):
                    log_flow = derivs[idx] + pc._log(node.weights)[j] + values[c] - root_val
                    flows[j] = float(np.sum(np.exp(log_flow)))
                total = flows.sum()
                if total <= 0:
                    new_nodes.append(node)
                else:
                    new_nodes.append(pc.make_sum(node.children, flows / total, node.scope))
            else:
                resp = np.exp(derivs[idx] + values[idx] - root_val)
                card = circ.schema.cardinality(node.var)
                mass = np.bincount(data[:, node.var], weights=resp, minlength=card)
                mass = mass + FIT_LEAF_SMOOTHING
                new_nodes.append(pc.make_leaf(node.var, mass / mass.sum()))
        nodes = new_nodes
    fitted = pc.Circuit(schema=circ.schema, nodes=tuple(nodes), root=circ.root)
    history.append(pc.mean_log_likelihood(fitted, data))
    return fitted, history
