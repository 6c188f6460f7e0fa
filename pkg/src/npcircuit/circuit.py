"""Smooth, decomposable probabilistic circuit over the class and attribute variables.

A circuit is a DAG of sum, product, and categorical-leaf nodes stored in a
topologically ordered table (children strictly before parents). Sum nodes mix
children defined on the same scope, product nodes combine children with
disjoint scopes, and leaves hold one categorical table over a single variable.
All evaluation happens in log space; probabilities appear only at the API
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidQuery, SpaceTooLarge, ZeroEvidence
from .schema import VariableSchema

KIND_SUM = "sum"
KIND_PRODUCT = "product"
KIND_LEAF = "leaf"

# Below this, a conditioning event counts as having zero probability.
TINY_MASS = 1e-300
LOG_TINY = np.log(TINY_MASS)

DEFAULT_ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class CircuitNode:
    """One node of the circuit table.

    Sum nodes carry ``children`` and matching ``weights``; product nodes carry
    ``children`` only; leaves carry ``var`` and ``table``. ``scope`` is the set
    of variable indices the node defines a distribution over.
    """

    kind: str
    scope: frozenset[int]
    children: tuple[int, ...] = ()
    weights: np.ndarray | None = None
    var: int = -1
    table: np.ndarray | None = None


def make_leaf(var: int, table) -> CircuitNode:
    table = np.asarray(table, dtype=np.float64)
    return CircuitNode(kind=KIND_LEAF, scope=frozenset([var]), var=var, table=table)


def make_sum(children: tuple[int, ...], weights, scope) -> CircuitNode:
    weights = np.asarray(weights, dtype=np.float64)
    return CircuitNode(
        kind=KIND_SUM, scope=frozenset(scope), children=tuple(children), weights=weights
    )


def make_product(children: tuple[int, ...], scope) -> CircuitNode:
    return CircuitNode(kind=KIND_PRODUCT, scope=frozenset(scope), children=tuple(children))


@dataclass(frozen=True)
class Circuit:
    """Topologically ordered node table plus schema; immutable once built.

    Concurrent read-only evaluation is safe; fitting routines return new
    circuits instead of mutating.
    """

    schema: VariableSchema
    nodes: tuple[CircuitNode, ...]
    root: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not 0 <= self.root < len(self.nodes):
            raise ValueError("root index out of range")


@dataclass(frozen=True)
class Query:
    """Observed values plus the set of variables summed out."""

    assignment: dict[int, int]
    marginalized: frozenset[int] = frozenset()


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


def validate(circuit: Circuit, joint_cap: int = DEFAULT_ENUMERATION_CAP) -> ValidationReport:
    """Check every structural invariant; returns all violations found.

    Checks: topological ordering, weight normalization and nonnegativity,
    smoothness of sum nodes, decomposability of product nodes, leaf table
    normalization, root scope coverage, and (for state spaces up to
    ``joint_cap``) that the full joint sums to one.
    """
    report = ValidationReport()
    schema = circuit.schema
    for idx, node in enumerate(circuit.nodes):
        tag = f"node {idx} ({node.kind})"
        if node.kind == KIND_LEAF:
            if len(node.scope) != 1 or node.var not in node.scope:
                report.violations.append(f"{tag}: leaf scope must be the singleton of its variable")
            if node.var < 0 or node.var >= schema.n_variables:
                report.violations.append(f"{tag}: leaf variable {node.var} out of range")
                continue
            if node.table is None or len(node.table) != schema.cardinality(node.var):
                report.violations.append(f"{tag}: leaf table length mismatch")
                continue
            if np.any(node.table < 0):
                report.violations.append(f"{tag}: leaf table has negative entries")
            if abs(float(np.sum(node.table)) - 1.0) > 1e-9:
                report.violations.append(f"{tag}: leaf table sums to {np.sum(node.table)!r}, not 1")
        elif node.kind in (KIND_SUM, KIND_PRODUCT):
            if not node.children:
                report.violations.append(f"{tag}: no children")
                continue
            if any(c >= idx or c < 0 for c in node.children):
                report.violations.append(f"{tag}: children must precede the node in the table")
                continue
            child_scopes = [circuit.nodes[c].scope for c in node.children]
            if node.kind == KIND_SUM:
                if node.weights is None or len(node.weights) != len(node.children):
                    report.violations.append(f"{tag}: weights/children length mismatch")
                else:
                    if np.any(node.weights < 0):
                        report.violations.append(f"{tag}: negative weights")
                    if abs(float(np.sum(node.weights)) - 1.0) > 1e-9:
                        report.violations.append(
                            f"{tag}: weights sum to {float(np.sum(node.weights))!r}, not 1"
                        )
                for c, cs in zip(node.children, child_scopes):
                    if cs != node.scope:
                        report.violations.append(
                            f"{tag}: child {c} scope differs from sum scope (smoothness)"
                        )
            else:
                union = set()
                disjoint = True
                for cs in child_scopes:
                    if union & cs:
                        disjoint = False
                    union |= cs
                if not disjoint:
                    report.violations.append(f"{tag}: children scopes overlap (decomposability)")
                if union != set(node.scope):
                    report.violations.append(f"{tag}: children scopes do not union to node scope")
        else:
            report.violations.append(f"{tag}: unknown kind")
    root_scope = circuit.nodes[circuit.root].scope
    if root_scope != frozenset(range(schema.n_variables)):
        report.violations.append("root scope does not cover all variables")
    if report.valid and schema.total_state_size <= joint_cap:
        total = _total_mass(circuit)
        if abs(total - 1.0) > 1e-6:
            report.violations.append(f"full joint sums to {total!r}, not 1")
    return report


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _logsumexp(stack: np.ndarray, axis: int = 0) -> np.ndarray:
    """logsumexp that maps all-(-inf) slices to -inf without warnings."""
    m = np.max(stack, axis=axis)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = safe + np.log(np.sum(np.exp(stack - np.expand_dims(safe, axis)), axis=axis))
    return np.where(np.isfinite(m), out, -np.inf)


def log_values(circuit: Circuit, assignments: np.ndarray) -> np.ndarray:
    """Bottom-up log value of the root for each assignment row.

    ``assignments`` has shape (n, n_variables); an entry of -1 marks a
    marginalized variable, whose leaves evaluate to one.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    n = assignments.shape[0]
    values: list[np.ndarray] = [None] * len(circuit.nodes)  # type: ignore[list-item]
    for idx, node in enumerate(circuit.nodes):
        if node.kind == KIND_LEAF:
            col = assignments[:, node.var]
            v = np.zeros(n)
            observed = col >= 0
            if observed.any():
                v[observed] = _log(node.table)[col[observed]]
            values[idx] = v
        elif node.kind == KIND_PRODUCT:
            acc = values[node.children[0]].copy()
            for c in node.children[1:]:
                acc = acc + values[c]
            values[idx] = acc
        else:
            stack = np.stack([values[c] for c in node.children], axis=0)
            stack = stack + _log(node.weights)[:, None]
            values[idx] = _logsumexp(stack, axis=0)
    return values[circuit.root]


def all_node_log_values(circuit: Circuit, assignments: np.ndarray) -> list[np.ndarray]:
    """Like :func:`log_values` but keeps every node's value (used by fitting)."""
    assignments = np.asarray(assignments, dtype=np.int64)
    n = assignments.shape[0]
    values: list[np.ndarray] = [None] * len(circuit.nodes)  # type: ignore[list-item]
    for idx, node in enumerate(circuit.nodes):
        if node.kind == KIND_LEAF:
            col = assignments[:, node.var]
            v = np.zeros(n)
            observed = col >= 0
            if observed.any():
                v[observed] = _log(node.table)[col[observed]]
            values[idx] = v
        elif node.kind == KIND_PRODUCT:
            acc = values[node.children[0]].copy()
            for c in node.children[1:]:
                acc = acc + values[c]
            values[idx] = acc
        else:
            stack = np.stack([values[c] for c in node.children], axis=0)
            stack = stack + _log(node.weights)[:, None]
            values[idx] = _logsumexp(stack, axis=0)
    return values


def evaluate(circuit: Circuit, query: Query) -> float:
    """Probability of the query with marginalized variables summed out.

    One bottom-up pass; a marginalized leaf evaluates to one. Raises
    InvalidQuery if some variable is neither assigned nor marginalized.
    """
    n_vars = circuit.schema.n_variables
    assigned = set(query.assignment)
    marg = set(query.marginalized)
    if assigned & marg:
        raise InvalidQuery("assignment and marginalized sets overlap")
    if assigned | marg != set(range(n_vars)):
        missing = set(range(n_vars)) - assigned - marg
        raise InvalidQuery(f"variables {sorted(missing)} neither assigned nor marginalized")
    row = np.full((1, n_vars), -1, dtype=np.int64)
    for var, value in query.assignment.items():
        if not 0 <= value < circuit.schema.cardinality(var):
            raise InvalidQuery(f"value {value} out of range for variable {var}")
        row[0, var] = value
    return float(np.exp(log_values(circuit, row)[0]))


def _total_mass(circuit: Circuit) -> float:
    schema = circuit.schema
    attrs = schema.enumerate_attribute_space()
    log_joint = class_joint_log_batch(circuit, attrs)
    return float(np.exp(_logsumexp(log_joint.reshape(-1), axis=0)))


def class_joint_log_batch(circuit: Circuit, attrs: np.ndarray) -> np.ndarray:
    """Log joint P(Y=y, A=a) for every row a and every class y, shape (n, |Y|).

    A single bottom-up pass per batch: nodes whose scope contains the class
    variable carry a vector over its values, others carry a scalar per row.
    Decomposability guarantees at most one child of a product carries the
    class; smoothness guarantees sum children agree.
    """
    attrs = np.asarray(attrs, dtype=np.int64)
    n = attrs.shape[0]
    n_classes = circuit.schema.class_cardinality
    values: list[np.ndarray] = [None] * len(circuit.nodes)  # type: ignore[list-item]
    for idx, node in enumerate(circuit.nodes):
        has_class = 0 in node.scope
        if node.kind == KIND_LEAF:
            if node.var == 0:
                values[idx] = np.broadcast_to(_log(node.table)[None, :], (n, n_classes))
            else:
                values[idx] = _log(node.table)[attrs[:, node.var - 1]]
        elif node.kind == KIND_PRODUCT:
            scalar_sum = None
            class_part = None
            for c in node.children:
                v = values[c]
                if v.ndim == 2:
                    class_part = v
                else:
                    scalar_sum = v if scalar_sum is None else scalar_sum + v
            if class_part is None:
                values[idx] = scalar_sum
            elif scalar_sum is None:
                values[idx] = class_part
            else:
                values[idx] = class_part + scalar_sum[:, None]
        else:
            stack = np.stack([values[c] for c in node.children], axis=0)
            logw = _log(node.weights)
            if has_class:
                stack = stack + logw[:, None, None]
            else:
                stack = stack + logw[:, None]
            values[idx] = _logsumexp(stack, axis=0)
    root_val = values[circuit.root]
    if root_val.ndim == 1:
        root_val = np.broadcast_to(root_val[:, None], (n, n_classes))
    return np.array(root_val, dtype=np.float64)


def class_joint_log(circuit: Circuit, a) -> np.ndarray:
    a = circuit.schema.validate_attribute_tuple(a)
    return class_joint_log_batch(circuit, np.asarray([a]))[0]


def conditional_class(circuit: Circuit, a) -> np.ndarray:
    """P(Y | A = a) as a probability vector over the classes.

    Raises ZeroEvidence when the circuit assigns numerically zero mass to the
    attribute tuple; callers decide the fallback (the integrator substitutes a
    uniform class distribution).
    """
    log_joint = class_joint_log(circuit, a)
    log_marginal = _logsumexp(log_joint, axis=0)
    if log_marginal < LOG_TINY:
        raise ZeroEvidence(f"P(A={tuple(a)}) underflows")
    return np.exp(log_joint - log_marginal)


def joint_table(circuit: Circuit, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Dense P(Y, A) over the whole space, shape (prod |A_k|, |Y|)."""
    schema = circuit.schema
    if schema.attribute_space_size > cap:
        raise SpaceTooLarge(f"{schema.attribute_space_size} attribute nodes exceed cap {cap}")
    attrs = schema.enumerate_attribute_space()
    return np.exp(class_joint_log_batch(circuit, attrs))


def conditional_table(circuit: Circuit, cap: int = DEFAULT_ENUMERATION_CAP):
    """Dense P(Y | A) rows plus a mask of zero-evidence rows.

    Zero-evidence rows are filled with the uniform class distribution so that
    downstream mixtures stay normalized; the mask reports which rows fell back.
    """
    schema = circuit.schema
    if schema.attribute_space_size > cap:
        raise SpaceTooLarge(f"{schema.attribute_space_size} attribute nodes exceed cap {cap}")
    attrs = schema.enumerate_attribute_space()
    log_joint = class_joint_log_batch(circuit, attrs)
    log_marginal = _logsumexp(log_joint.T, axis=0)
    zero_mask = log_marginal < LOG_TINY
    cond = np.empty_like(log_joint)
    ok = ~zero_mask
    cond[ok] = np.exp(log_joint[ok] - log_marginal[ok, None])
    cond[zero_mask] = 1.0 / schema.class_cardinality
    return cond, zero_mask


def mean_log_likelihood(circuit: Circuit, rows: np.ndarray) -> float:
    """Mean log joint probability of full (y, a_1..K) rows."""
    rows = np.asarray(rows, dtype=np.int64)
    return float(np.mean(log_values(circuit, rows)))


# -- serialization ------------------------------------------------------------

FORMAT_HEADER = "PCIRCUIT v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def circuit_to_text(circuit: Circuit) -> str:
    lines = [FORMAT_HEADER]
    schema = circuit.schema
    lines.append(
        "schema "
        + str(schema.class_cardinality)
        + " "
        + " ".join(str(c) for c in schema.attribute_cardinalities)
    )
    lines.append(f"nodes {len(circuit.nodes)} root {circuit.root}")
    for idx, node in enumerate(circuit.nodes):
        scope = ",".join(str(v) for v in sorted(node.scope))
        if node.kind == KIND_LEAF:
            payload = " ".join(_fmt(x) for x in node.table)
            lines.append(f"{idx} leaf {scope} - {payload}")
        else:
            children = ",".join(str(c) for c in node.children)
            if node.kind == KIND_SUM:
                payload = " ".join(_fmt(x) for x in node.weights)
                lines.append(f"{idx} sum {scope} {children} {payload}")
            else:
                lines.append(f"{idx} product {scope} {children}")
    return "\n".join(lines) + "\n"


def circuit_from_text(text: str) -> Circuit:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError(f"expected '{FORMAT_HEADER}' header")
    schema_parts = lines[1].split()
    if schema_parts[0] != "schema":
        raise ValueError("missing schema line")
    schema = VariableSchema(int(schema_parts[1]), tuple(int(c) for c in schema_parts[2:]))
    meta = lines[2].split()
    n_nodes, root = int(meta[1]), int(meta[3])
    nodes = []
    for ln in lines[3 : 3 + n_nodes]:
        parts = ln.split()
        kind = parts[1]
        scope = frozenset(int(v) for v in parts[2].split(","))
        if kind == KIND_LEAF:
            var = next(iter(scope))
            table = np.array([float(x) for x in parts[4:]], dtype=np.float64)
            nodes.append(CircuitNode(kind=KIND_LEAF, scope=scope, var=var, table=table))
        elif kind == KIND_SUM:
            children = tuple(int(c) for c in parts[3].split(","))
            weights = np.array([float(x) for x in parts[4:]], dtype=np.float64)
            nodes.append(
                CircuitNode(kind=KIND_SUM, scope=scope, children=children, weights=weights)
            )
        else:
            children = tuple(int(c) for c in parts[3].split(","))
            nodes.append(CircuitNode(kind=KIND_PRODUCT, scope=scope, children=children))
    return Circuit(schema=schema, nodes=tuple(nodes), root=root)


def save_circuit(circuit: Circuit, path) -> None:
    with open(path, "w") as fh:
        fh.write(circuit_to_text(circuit))


def load_circuit(path) -> Circuit:
    with open(path) as fh:
        return circuit_from_text(fh.read())
