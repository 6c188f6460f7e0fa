"""Synthetic dataset generator with closed-form ground-truth distributions.

Each attribute gets a contiguous feature block. A sample draws a latent node
(a full attribute tuple) from the prior over planted nodes, emits per-block
Gaussian features around that node's mean pattern, and records possibly
noise-corrupted labels: with probability ``label_noise`` either the class
label or the attribute labels are randomized (one coin decides which).
Features always come from the latent node, so label noise is annotation
noise, not feature noise.

Blocks can carry a second, weaker pattern keyed by the previous attribute's
value (``cross_coupling``). That plants the cross-attribute feature
correlations under which an attack on one attribute leaks into the others,
which is the propagation scenario studied by the harness; coupling 0 keeps
blocks clean and makes the per-block Bayes posterior exact.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import SearchExhausted
from .schema import VariableSchema

TASK_NODE_PER_CLASS = "node_per_class"
TASK_DIGIT_SUM = "digit_sum"

# Mean patterns live well inside [0, 1] so that clipping the Gaussian features
# to the unit box stays a negligible part of the observation channel.
MEAN_LOW_DEFAULT = 0.33
MEAN_HIGH_DEFAULT = 0.67
CROSS_PATTERN_AMPLITUDE = 0.12


SCOPE_BLOCK = "block"  # each recognizer reads its attribute's feature block
SCOPE_ADJACENT = "adjacent"  # each window also covers the following block
SCOPE_SHARED_PAIR = "shared-pair"  # attributes 1 and 2 both read blocks 1-2
SCOPE_FULL = "full"  # every recognizer reads the whole input


@dataclass(frozen=True)
class GeneratorSpec:
    schema: VariableSchema
    planted_nodes: tuple[tuple[int, ...], ...]
    task: str = TASK_NODE_PER_CLASS
    label_noise: float = 0.01
    block_dim: int = 16
    noise_std: float = 0.045
    mean_low: float = MEAN_LOW_DEFAULT
    mean_high: float = MEAN_HIGH_DEFAULT
    min_separation_sigmas: float = 4.0
    cross_coupling: float = 0.0
    coupled_blocks: tuple[int, ...] | None = None  # blocks carrying a shared pattern
    recognizer_scope: str = SCOPE_BLOCK
    class_prior: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "planted_nodes", tuple(tuple(int(v) for v in n) for n in self.planted_nodes)
        )
        if len(set(self.planted_nodes)) != len(self.planted_nodes):
            raise ValueError("planted nodes must be pairwise distinct")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must be in [0, 0.5)")
        if self.task not in (TASK_NODE_PER_CLASS, TASK_DIGIT_SUM):
            raise ValueError(f"unknown task {self.task!r}")
        if self.class_prior is not None:
            prior = tuple(float(p) for p in self.class_prior)
            if len(prior) != len(self.planted_nodes) or abs(sum(prior) - 1) > 1e-9:
                raise ValueError("class_prior must be a distribution over the planted nodes")
            object.__setattr__(self, "class_prior", prior)
        for node in self.planted_nodes:
            self.schema.validate_attribute_tuple(node)
        if self.schema.class_cardinality != self.n_classes:
            raise ValueError(
                f"schema declares {self.schema.class_cardinality} classes but the task "
                f"induces {self.n_classes}"
            )

    @property
    def input_dim(self) -> int:
        return self.block_dim * self.schema.n_attributes

    @property
    def prior(self) -> np.ndarray:
        if self.class_prior is None:
            return np.full(len(self.planted_nodes), 1.0 / len(self.planted_nodes))
        return np.asarray(self.class_prior)

    def feature_slices(self) -> list[tuple[int, int]]:
        return [
            (k * self.block_dim, (k + 1) * self.block_dim)
            for k in range(self.schema.n_attributes)
        ]

    def recognizer_slices(self) -> list[tuple[int, int]] | None:
        """Recommended per-attribute input windows for the recognizer.

        Attacks only reach coordinates inside the attacked attribute's window,
        so the windows control how much an attack on one attribute can leak
        into the others: own-block windows keep attributes isolated, while the
        adjacent mode overlaps each window with the following block, which is
        the propagation scenario (attacks on one attribute reach part of what
        the next recognizer reads).
        """
        if self.recognizer_scope == SCOPE_FULL:
            return None
        if self.recognizer_scope == SCOPE_BLOCK:
            return self.feature_slices()
        if self.recognizer_scope == SCOPE_ADJACENT:
            k_attrs = self.schema.n_attributes
            return [
                (k * self.block_dim, min(k + 2, k_attrs) * self.block_dim)
                for k in range(k_attrs)
            ]
        if self.recognizer_scope == SCOPE_SHARED_PAIR:
            if self.schema.n_attributes < 2:
                return self.feature_slices()
            shared = (0, 2 * self.block_dim)
            return [shared, shared] + self.feature_slices()[2:]
        raise ValueError(f"unknown recognizer_scope {self.recognizer_scope!r}")

    def classes(self) -> list:
        if self.task == TASK_NODE_PER_CLASS:
            return list(range(len(self.planted_nodes)))
        return sorted({sum(node) for node in self.planted_nodes})

    def node_class(self, node) -> int:
        if self.task == TASK_NODE_PER_CLASS:
            return self.planted_nodes.index(tuple(node))
        return self.classes().index(sum(node))

    @property
    def n_classes(self) -> int:
        return len(self.classes())


def sample_attribute_set(
    schema: VariableSchema, size: int, target_dmin: int, seed: int = 0, max_tries: int = 2000
) -> tuple[tuple[int, ...], ...]:
    """Random search for ``size`` nodes with pairwise Hamming distance >= target.

    Nodes are proposed one by one and rejected when too close to the accepted
    ones; a stuck proposal restarts the whole set. Raises SearchExhausted when
    the retry budget runs out, which signals infeasible or hard parameters.
    """
    if size > schema.attribute_space_size:
        raise SearchExhausted("more nodes requested than the attribute space holds")
    rng = np.random.default_rng(seed)
    cards = schema.attribute_cardinalities
    for _ in range(max_tries):
        chosen: list[tuple[int, ...]] = []
        stuck = False
        for _ in range(size):
            for _ in range(200):
                cand = tuple(int(rng.integers(0, c)) for c in cards)
                if all(
                    sum(x != y for x, y in zip(cand, node)) >= target_dmin for node in chosen
                ):
                    chosen.append(cand)
                    break
            else:
                stuck = True
                break
        if not stuck:
            return tuple(chosen)
    raise SearchExhausted(
        f"no {size}-node set with minimum distance {target_dmin} found in {max_tries} restarts"
    )


def _draw_separated_means(rng, count, dim, low, high, min_dist, max_tries=5000):
    means = []
    for _ in range(count):
        for _ in range(max_tries):
            cand = rng.uniform(low, high, size=dim)
            if all(np.linalg.norm(cand - m) >= min_dist for m in means):
                means.append(cand)
                break
        else:
            raise SearchExhausted("could not place separated mean vectors")
    return np.asarray(means)


class FeatureBank:
    """Deterministic per-attribute mean patterns derived from the generator seed."""

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        min_dist = spec.min_separation_sigmas * spec.noise_std
        self.mu = [
            _draw_separated_means(
                rng, card, spec.block_dim, spec.mean_low, spec.mean_high, min_dist
            )
            for card in spec.schema.attribute_cardinalities
        ]
        k_attrs = spec.schema.n_attributes
        self.xi = None
        if spec.cross_coupling > 0 and k_attrs > 1:
            carriers = (
                set(range(k_attrs))
                if spec.coupled_blocks is None
                else set(spec.coupled_blocks)
            )
            self.xi = []
            for k in range(k_attrs):
                if k not in carriers:
                    self.xi.append(None)
                    continue
                src = (k - 1) % k_attrs
                card = spec.schema.attribute_cardinalities[src]
                self.xi.append(
                    rng.uniform(
                        -CROSS_PATTERN_AMPLITUDE,
                        CROSS_PATTERN_AMPLITUDE,
                        size=(card, spec.block_dim),
                    )
                )

    def mean_for_node(self, node) -> np.ndarray:
        spec = self.spec
        k_attrs = spec.schema.n_attributes
        parts = []
        for k in range(k_attrs):
            block = self.mu[k][node[k]].copy()
            if self.xi is not None and self.xi[k] is not None:
                src = (k - 1) % k_attrs
                block += spec.cross_coupling * self.xi[k][node[src]]
            parts.append(block)
        return np.concatenate(parts)


@dataclass
class Dataset:
    x: np.ndarray
    latent: np.ndarray
    attributes: np.ndarray
    labels: np.ndarray
    spec: GeneratorSpec

    def __len__(self):
        return len(self.x)

    @property
    def rows(self) -> np.ndarray:
        """Full (y, a_1..K) label rows for circuit learning."""
        return np.column_stack([self.labels, self.attributes])


class GroundTruth:
    """Exact distributions of the sampling law.

    ``attribute_posterior`` works on pre-clipping latent features: for
    uncoupled blocks it is the per-block Gaussian Bayes posterior of the
    generating value; for coupled blocks it marginalizes the exact posterior
    over the planted latent node. The joint over recorded labels and the
    class posterior come from the closed-form noise model.
    """

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        self.bank = FeatureBank(spec)
        self.schema = spec.schema
        self._joint = self._build_joint()
        cond = np.empty_like(self._joint)
        marg = self._joint.sum(axis=1)
        ok = marg > 0
        cond[ok] = self._joint[ok] / marg[ok, None]
        cond[~ok] = 1.0 / spec.n_classes
        self._cond = cond
        self._node_mass = marg
        prior = spec.prior
        planted = np.asarray(spec.planted_nodes)
        self._value_prior = []
        for k, card in enumerate(self.schema.attribute_cardinalities):
            self._value_prior.append(np.bincount(planted[:, k], weights=prior, minlength=card))

    def _build_joint(self) -> np.ndarray:
        spec = self.spec
        schema = self.schema
        eps = spec.label_noise
        n_y = spec.n_classes
        omega = schema.attribute_space_size
        prior = spec.prior
        joint = np.zeros((omega, n_y))
        class_dist = np.zeros(n_y)
        for node, nu in zip(spec.planted_nodes, prior):
            class_dist[spec.node_class(node)] += nu
        # attribute relabeling spreads mass uniformly over the whole space
        joint += (eps / 2) * class_dist[None, :] / omega
        for node, nu in zip(spec.planted_nodes, prior):
            idx = schema.node_index(node)
            joint[idx, spec.node_class(node)] += (1 - eps) * nu
            joint[idx, :] += (eps / 2) * nu / n_y
        return joint

    def joint_table(self) -> np.ndarray:
        return self._joint.copy()

    def conditional_table(self) -> np.ndarray:
        return self._cond.copy()

    def node_mass(self, node) -> float:
        return float(self._node_mass[self.schema.node_index(node)])

    def min_planted_mass(self) -> float:
        return min(self.node_mass(n) for n in self.spec.planted_nodes)

    def attribute_posterior_batch(self, latent: np.ndarray) -> list[np.ndarray]:
        latent = np.atleast_2d(np.asarray(latent, dtype=np.float64))
        spec = self.spec
        two_var = 2 * spec.noise_std**2
        if self.bank.xi is None:
            out = []
            for k, (start, stop) in enumerate(spec.feature_slices()):
                xb = latent[:, start:stop]
                sq = ((xb[:, None, :] - self.bank.mu[k][None, :, :]) ** 2).sum(axis=2)
                with np.errstate(divide="ignore"):
                    logp = np.log(self._value_prior[k])[None, :] - sq / two_var
                logp -= logp.max(axis=1, keepdims=True)
                p = np.exp(logp)
                out.append(p / p.sum(axis=1, keepdims=True))
            return out
        # coupled blocks: exact posterior over the planted latent node
        means = np.asarray([self.bank.mean_for_node(n) for n in spec.planted_nodes])
        sq = ((latent[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        with np.errstate(divide="ignore"):
            logw = np.log(spec.prior)[None, :] - sq / two_var
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        planted = np.asarray(spec.planted_nodes)
        out = []
        for k, card in enumerate(self.schema.attribute_cardinalities):
            p = np.zeros((len(latent), card))
            for v in range(card):
                sel = planted[:, k] == v
                if sel.any():
                    p[:, v] = w[:, sel].sum(axis=1)
            out.append(p)
        return out

    def attribute_posterior(self, latent: np.ndarray) -> list[np.ndarray]:
        mats = self.attribute_posterior_batch(latent)
        if np.asarray(latent).ndim == 1:
            return [m[0] for m in mats]
        return mats

    def class_posterior_batch(self, latent: np.ndarray) -> np.ndarray:
        """P(Y | x) under sufficiency: attribute posterior mixed with P(Y | A)."""
        mats = self.attribute_posterior_batch(latent)
        mass = node_mass_matrix(mats, self.schema)
        return mass @ self._cond


def node_mass_matrix(prob_mats: list[np.ndarray], schema: VariableSchema) -> np.ndarray:
    """Product-distribution masses over the whole attribute space, (n, prod cards)."""
    out = prob_mats[0]
    for m in prob_mats[1:]:
        out = out[:, :, None] * m[:, None, :]
        out = out.reshape(out.shape[0], -1)
    return out


def generate(spec: GeneratorSpec, n: int, seed: int = 0) -> Dataset:
    """Draw n samples; labels may be noise-corrupted, features never are."""
    rng = np.random.default_rng(seed)
    schema = spec.schema
    bank = FeatureBank(spec)
    node_means = np.asarray([bank.mean_for_node(node) for node in spec.planted_nodes])
    z_idx = rng.choice(len(spec.planted_nodes), size=n, p=spec.prior)
    planted = np.asarray(spec.planted_nodes, dtype=np.int64)
    attrs = planted[z_idx].copy()
    labels = np.asarray([spec.node_class(node) for node in planted])[z_idx]
    noisy = rng.random(n) < spec.label_noise
    which = rng.random(n) < 0.5
    flip_class = noisy & which
    flip_attrs = noisy & ~which
    if flip_class.any():
        labels[flip_class] = rng.integers(0, spec.n_classes, size=int(flip_class.sum()))
    if flip_attrs.any():
        for k, card in enumerate(schema.attribute_cardinalities):
            attrs[flip_attrs, k] = rng.integers(0, card, size=int(flip_attrs.sum()))
    latent = node_means[z_idx] + rng.normal(0, spec.noise_std, size=(n, spec.input_dim))
    x = np.clip(latent, 0.0, 1.0)
    return Dataset(x=x, latent=latent, attributes=attrs, labels=labels, spec=spec)


def ground_truth(spec: GeneratorSpec) -> GroundTruth:
    return GroundTruth(spec)


# -- presets -------------------------------------------------------------------

MNIST_ADD3_NODES = (
    (6, 3, 7), (9, 6, 8), (0, 2, 4), (3, 0, 5), (5, 5, 1),
    (7, 4, 3), (2, 7, 6), (4, 1, 2), (1, 9, 0), (8, 8, 9),
)

MNIST_ADD5_NODES = (
    (6, 3, 7, 4, 6), (0, 9, 5, 3, 1), (5, 0, 9, 2, 3), (2, 7, 8, 5, 4),
    (8, 2, 4, 9, 8), (7, 5, 0, 6, 0), (3, 4, 6, 1, 2), (4, 1, 3, 0, 5),
    (1, 6, 2, 8, 9), (9, 8, 1, 7, 7),
)

CELEBA_NODES = (
    (2, 1, 0, 0, 0, 1, 0, 0), (1, 0, 0, 0, 0, 1, 1, 1), (1, 1, 1, 1, 0, 1, 1, 0),
    (1, 1, 0, 0, 1, 0, 0, 1), (2, 0, 1, 1, 1, 1, 0, 1), (0, 1, 1, 0, 1, 1, 1, 1),
    (0, 0, 0, 1, 0, 0, 0, 1), (3, 0, 1, 0, 1, 0, 1, 0), (0, 0, 0, 1, 1, 1, 1, 0),
    (0, 1, 1, 1, 1, 0, 0, 0),
)

# Strength of the shared feature directions in the propagation scenario.
CORRELATED_COUPLING = 0.9

# Propagation-scenario node set: the ten aligned nodes plus four that break
# the pairing, so the first two attributes correlate strongly but not
# perfectly. A recognizer may then lean on the other attribute's shared
# directions (spurious reliance), while robust training can still fall back
# on the attribute's own, fully reliable subspace.
CORRELATED_NODES = MNIST_ADD3_NODES + (
    (6, 8, 2), (9, 1, 5), (0, 5, 9), (3, 7, 0),
)


def presets() -> dict[str, GeneratorSpec]:
    """Named generator presets, including one with strong feature sharing.

    The standard presets keep blocks clean (no coupling, own-block recognizer
    scopes), so an attack on one attribute cannot reach the others. The
    ``correlated`` preset plants each attribute's pattern in the next block
    too and widens the recognizer windows accordingly; attacking one
    attribute then degrades its neighbor through the shared directions.
    """
    add3 = GeneratorSpec(
        schema=VariableSchema(10, (10, 10, 10)),
        planted_nodes=MNIST_ADD3_NODES,
        task=TASK_DIGIT_SUM,
        seed=101,
    )
    add5 = GeneratorSpec(
        schema=VariableSchema(7, (10, 10, 10, 10, 10)),
        planted_nodes=MNIST_ADD5_NODES,
        task=TASK_DIGIT_SUM,
        seed=102,
    )
    celeba = GeneratorSpec(
        schema=VariableSchema(10, (4, 2, 2, 2, 2, 2, 2, 2)),
        planted_nodes=CELEBA_NODES,
        task=TASK_NODE_PER_CLASS,
        seed=103,
    )
    correlated = GeneratorSpec(
        schema=VariableSchema(14, (10, 10, 10)),
        planted_nodes=CORRELATED_NODES,
        task=TASK_NODE_PER_CLASS,
        cross_coupling=CORRELATED_COUPLING,
        recognizer_scope=SCOPE_SHARED_PAIR,
        coupled_blocks=(1,),
        seed=104,
    )
    return {
        "mnist-add3-like": add3,
        "mnist-add5-like": add5,
        "celeba-like": celeba,
        "correlated": correlated,
    }


# -- serialization ------------------------------------------------------------

FORMAT_HEADER = "DSET v1"


def spec_to_json(spec: GeneratorSpec) -> str:
    d = asdict(spec)
    d["schema"] = {
        "class_cardinality": spec.schema.class_cardinality,
        "attribute_cardinalities": list(spec.schema.attribute_cardinalities),
    }
    d["planted_nodes"] = [list(n) for n in spec.planted_nodes]
    return json.dumps(d, sort_keys=True)


def spec_from_json(text: str) -> GeneratorSpec:
    d = json.loads(text)
    d["schema"] = VariableSchema(
        d["schema"]["class_cardinality"], tuple(d["schema"]["attribute_cardinalities"])
    )
    d["planted_nodes"] = tuple(tuple(n) for n in d["planted_nodes"])
    if d.get("class_prior") is not None:
        d["class_prior"] = tuple(d["class_prior"])
    return GeneratorSpec(**d)


def save_dataset(ds: Dataset, path) -> None:
    n, d = ds.x.shape
    k = ds.attributes.shape[1]
    header = "\n".join(
        [FORMAT_HEADER, "spec " + spec_to_json(ds.spec), f"rows {n} dim {d} attrs {k}"]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(ds.x.astype("<f8").tobytes())
        fh.write(ds.latent.astype("<f8").tobytes())
        fh.write(ds.attributes.astype("<i8").tobytes())
        fh.write(ds.labels.astype("<i8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    header = buf.readline().decode("utf-8").strip()
    if header != FORMAT_HEADER:
        raise ValueError(f"expected '{FORMAT_HEADER}' header")
    spec_line = buf.readline().decode("utf-8").strip()
    spec = spec_from_json(spec_line[len("spec ") :])
    meta = buf.readline().decode("utf-8").split()
    n, d, k = int(meta[1]), int(meta[3]), int(meta[5])
    x = np.frombuffer(buf.read(n * d * 8), dtype="<f8").reshape(n, d).copy()
    latent = np.frombuffer(buf.read(n * d * 8), dtype="<f8").reshape(n, d).copy()
    attrs = np.frombuffer(buf.read(n * k * 8), dtype="<i8").reshape(n, k).copy()
    labels = np.frombuffer(buf.read(n * 8), dtype="<i8").copy()
    return Dataset(x=x, latent=latent, attributes=attrs, labels=labels, spec=spec)
