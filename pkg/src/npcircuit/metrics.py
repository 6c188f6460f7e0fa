"""Total-variation machinery and empirical verification of the robustness and
error bounds.

Per attacked sample the bound records hold, side by side: the TV distance
between benign and adversarial class distributions under node-wise inference,
the TV distance between the two product attribute distributions, the summed
per-attribute TV distances, the class-wise TV distance, the worst relative
neighborhood-mass change, and the smallest benign neighborhood mass. The
verification suites assert the three inequality chains per sample:

  node-wise TV  <=  joint attribute TV  <=  summed per-attribute TV
  class-wise TV <=  max relative neighborhood-mass change
  max relative change  <=  joint attribute TV / smallest benign mass

plus the compositional-error and trade-off bounds against exact ground truth.
Records with a numerically zero benign neighborhood mass are flagged and
excluded from ratio-based assertions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import circuit as pc
from . import integrator as it
from . import recognizer as rec
from .errors import LengthMismatch
from .geometry import ClassPartition

ZERO_MASS = 1e-300
CHAIN_TOL = 1e-9


def tv(p, q) -> float:
    """Total variation distance, half the L1 distance between the vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"shape {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def tv_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(axis=1)


def accuracy(predictions, truths) -> float:
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise LengthMismatch(f"shape {predictions.shape} vs {truths.shape}")
    return float(np.mean(predictions == truths))


def attribute_accuracy(predictions: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Fraction correct per attribute for (n, K) prediction and label arrays."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise LengthMismatch(f"shape {predictions.shape} vs {truths.shape}")
    return np.mean(predictions == truths, axis=0)


@dataclass
class BoundRecord:
    sample_id: int
    tv_pred: float  # node-wise benign vs adversarial class TV
    attr_joint_tv: float
    attr_sum_tv: float
    rnpc_tv: float
    rnpc_ratio_bound: float
    c_floor: float
    flagged: bool = False


def npc_bound_check(benign_probs, adv_probs, circuit: pc.Circuit, cache=None) -> dict:
    """Node-wise chain for one sample: class TV, joint attribute TV, sum TV."""
    cache = cache or it.CircuitCache(circuit)
    b = it.npc_infer(benign_probs, circuit, cache)
    a = it.npc_infer(adv_probs, circuit, cache)
    tv_pred = tv(b.normalized, a.normalized)
    mass_b = it.node_mass_vector(benign_probs, circuit.schema)
    mass_a = it.node_mass_vector(adv_probs, circuit.schema)
    joint = tv(mass_b, mass_a)
    per_attr = sum(
        tv(pb, pa) for pb, pa in zip(it._as_prob_list(benign_probs), it._as_prob_list(adv_probs))
    )
    return {
        "tv_pred": tv_pred,
        "attr_joint_tv": joint,
        "attr_sum_tv": per_attr,
        "chain_holds": tv_pred <= joint + CHAIN_TOL and joint <= per_attr + CHAIN_TOL,
    }


def rnpc_bound_check(
    benign_probs, adv_probs, circuit: pc.Circuit, partition: ClassPartition, cache=None
) -> dict:
    """Class-wise bound for one sample: TV against the worst mass ratio."""
    cache = cache or it.CircuitCache(circuit)
    b = it.rnpc_infer(benign_probs, circuit, partition, cache=cache)
    a = it.rnpc_infer(adv_probs, circuit, partition, cache=cache)
    mass_b = it.neighborhood_masses(benign_probs, partition)
    mass_a = it.neighborhood_masses(adv_probs, partition)
    flagged = bool(np.any(mass_b < ZERO_MASS)) or b.uniform_fallback or a.uniform_fallback
    if flagged:
        ratio_bound = math.inf
    else:
        ratio_bound = float(np.max(np.abs(1.0 - mass_a / mass_b)))
    rnpc_tv = tv(b.normalized, a.normalized)
    return {
        "rnpc_tv": rnpc_tv,
        "rnpc_ratio_bound": ratio_bound,
        "c_floor": float(mass_b.min()),
        "flagged": flagged,
        "holds": flagged or rnpc_tv <= ratio_bound + CHAIN_TOL,
    }


def bound_records(
    benign_mats: list[np.ndarray],
    adv_mats: list[np.ndarray],
    circuit: pc.Circuit,
    partition: ClassPartition,
    cache: it.CircuitCache | None = None,
    sample_ids=None,
) -> list[BoundRecord]:
    """Vectorized per-sample records for whole attacked batches."""
    cache = cache or it.CircuitCache(circuit)
    n = benign_mats[0].shape[0]
    sample_ids = range(n) if sample_ids is None else sample_ids
    npc_b = it.npc_infer_batch(benign_mats, circuit, cache)
    npc_a = it.npc_infer_batch(adv_mats, circuit, cache)
    rnpc_b, fb_b = it.rnpc_infer_batch(benign_mats, circuit, partition, cache=cache)
    rnpc_a, fb_a = it.rnpc_infer_batch(adv_mats, circuit, partition, cache=cache)
    mass_b = it.neighborhood_mass_batch(benign_mats, partition)
    mass_a = it.neighborhood_mass_batch(adv_mats, partition)
    tv_npc = tv_rows(npc_b, npc_a)
    tv_rnpc = tv_rows(rnpc_b, rnpc_a)

    joint_tv = np.empty(n)
    chunk = 512
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        mb = benign_mats[0][sl]
        ma = adv_mats[0][sl]
        for k in range(1, len(benign_mats)):
            mb = (mb[:, :, None] * benign_mats[k][sl][:, None, :]).reshape(mb.shape[0], -1)
            ma = (ma[:, :, None] * adv_mats[k][sl][:, None, :]).reshape(ma.shape[0], -1)
        joint_tv[sl] = 0.5 * np.abs(mb - ma).sum(axis=1)
    sum_tv = np.zeros(n)
    for pb, pa in zip(benign_mats, adv_mats):
        sum_tv += 0.5 * np.abs(pb - pa).sum(axis=1)

    flagged = (mass_b < ZERO_MASS).any(axis=1) | fb_b | fb_a
    records = []
    for i, sid in enumerate(sample_ids):
        if flagged[i]:
            ratio = math.inf
        else:
            ratio = float(np.max(np.abs(1.0 - mass_a[i] / mass_b[i])))
        records.append(
            BoundRecord(
                sample_id=int(sid),
                tv_pred=float(tv_npc[i]),
                attr_joint_tv=float(joint_tv[i]),
                attr_sum_tv=float(sum_tv[i]),
                rnpc_tv=float(tv_rnpc[i]),
                rnpc_ratio_bound=ratio,
                c_floor=float(mass_b[i].min()),
                flagged=bool(flagged[i]),
            )
        )
    return records


def chain_violations(records: list[BoundRecord]) -> int:
    """Node-wise chain failures: class TV vs joint TV vs summed TV."""
    bad = 0
    for r in records:
        if r.tv_pred > r.attr_joint_tv + CHAIN_TOL or r.attr_joint_tv > r.attr_sum_tv + CHAIN_TOL:
            bad += 1
    return bad


def ratio_violations(records: list[BoundRecord]) -> int:
    """Class-wise bound failures on non-flagged records."""
    bad = 0
    for r in records:
        if not r.flagged and r.rnpc_tv > r.rnpc_ratio_bound + CHAIN_TOL:
            bad += 1
    return bad


def direct_comparison_check(records: list[BoundRecord], c_threshold: float = 0.01) -> dict:
    """Worst mass ratio against joint attribute TV scaled by the mass floor.

    Evaluated on every non-flagged record with a positive floor; the subset
    with floor above ``c_threshold`` is reported separately since that is the
    regime where the comparison is meaningful.
    """
    checked = violations = 0
    strong_checked = strong_violations = 0
    lhs_sum = rhs_sum = 0.0
    for r in records:
        if r.flagged or r.c_floor <= 0:
            continue
        holds = r.rnpc_ratio_bound <= r.attr_joint_tv / r.c_floor + CHAIN_TOL
        checked += 1
        violations += 0 if holds else 1
        lhs_sum += r.rnpc_ratio_bound
        rhs_sum += r.attr_joint_tv / r.c_floor
        if r.c_floor > c_threshold:
            strong_checked += 1
            strong_violations += 0 if holds else 1
    return {
        "checked": checked,
        "violations": violations,
        "strong_checked": strong_checked,
        "strong_violations": strong_violations,
        "mean_lhs": lhs_sum / checked if checked else 0.0,
        "mean_rhs": rhs_sum / checked if checked else 0.0,
    }


def alpha_epsilon(k: int, eps: float) -> float:
    """max(1 - exp(-K eps), exp(K eps) - 1); strictly increasing in eps."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return max(1.0 - math.exp(-k * eps), math.exp(k * eps) - 1.0)


def dp_sigma(eps: float, delta: float, ell: float) -> float:
    """Gaussian-mechanism noise scale sqrt(2 ln(1.25/delta)) * ell / eps."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * ell / eps


class SmoothedRecognizer:
    """Recognizer whose forward averages softmax outputs over noise draws.

    The noise matrix is drawn once from the seed, so the smoothed forward is
    a deterministic function of the input.
    """

    def __init__(self, params: rec.RecognizerParams, sigma: float, n_draws: int, seed: int = 0):
        self.params = params
        self.sigma = sigma
        self.n_draws = n_draws
        rng = np.random.default_rng(seed)
        self.noise = rng.normal(0.0, 1.0, size=(n_draws, params.input_dim))

    def forward_batch(self, x: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        sums = None
        for draw in self.noise:
            mats = rec.forward_batch(self.params, x + self.sigma * draw[None, :])
            if sums is None:
                sums = [m.copy() for m in mats]
            else:
                for acc, m in zip(sums, mats):
                    acc += m
        return [m / m.sum(axis=1, keepdims=True) for m in sums]

    def forward(self, x: np.ndarray) -> rec.AttributeProbs:
        mats = self.forward_batch(np.asarray(x)[None, :])
        return rec.AttributeProbs(probs=tuple(m[0] for m in mats))


def dp_wrap(
    params: rec.RecognizerParams, sigma: float, n_draws: int, seed: int = 0
) -> SmoothedRecognizer:
    return SmoothedRecognizer(params, sigma, n_draws, seed)


def _classwise_scores(mass: np.ndarray, contribs: np.ndarray, sizes: np.ndarray):
    """Normalized class-wise scores from neighborhood masses, (n, |Y|)."""
    unnorm = mass @ contribs
    z = mass @ sizes
    out = np.empty_like(unnorm)
    ok = z >= ZERO_MASS
    out[ok] = unnorm[ok] / z[ok, None]
    out[~ok] = 1.0 / contribs.shape[1]
    return out, ~ok


def _piece_contribs(joint: np.ndarray, partition: ClassPartition):
    """Per-class summed conditional vectors from a dense joint table."""
    schema = partition.schema
    n_y = schema.class_cardinality
    marg = joint.sum(axis=1)
    cond = np.empty_like(joint)
    ok = marg >= ZERO_MASS
    cond[ok] = joint[ok] / marg[ok, None]
    cond[~ok] = 1.0 / n_y
    contribs = np.zeros((n_y, n_y))
    sizes = np.zeros(n_y)
    for y, piece in partition.pieces.items():
        sizes[y] = len(piece)
        for node in piece:
            contribs[y] += cond[schema.node_index(node)]
    return contribs, sizes


def estimation_error_check(
    model_mats: list[np.ndarray],
    model_joint: np.ndarray,
    partition: ClassPartition,
    gt,
    latents: np.ndarray,
    gamma: float | None = None,
) -> dict:
    """Compositional-error bound against exact ground truth.

    LHS: expected TV between the model's class-wise scores and the optimal
    ones. RHS: expected worst relative neighborhood-mass error of the
    recognizer plus (2 / gamma) times the TV between the model joint and the
    true joint. ``gamma`` defaults to the smallest true planted-node mass.
    """
    gt_mats = gt.attribute_posterior_batch(latents)
    model_mass = it.neighborhood_mass_batch(model_mats, partition)
    gt_mass = it.neighborhood_mass_batch(gt_mats, partition)
    model_contribs, sizes = _piece_contribs(model_joint, partition)
    gt_contribs, _ = _piece_contribs(gt.joint_table(), partition)
    model_scores, fb_model = _classwise_scores(model_mass, model_contribs, sizes)
    gt_scores, fb_gt = _classwise_scores(gt_mass, gt_contribs, sizes)
    lhs = tv_rows(model_scores, gt_scores)
    flagged = (gt_mass < ZERO_MASS).any(axis=1) | fb_model | fb_gt
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_term = np.max(np.abs(1.0 - model_mass / gt_mass), axis=1)
    gamma = gamma if gamma is not None else gt.min_planted_mass()
    joint_term = (2.0 / gamma) * tv(model_joint.reshape(-1), gt.joint_table().reshape(-1))
    rhs = ratio_term + joint_term
    ok = ~flagged
    pointwise = int(np.sum(lhs[ok] > rhs[ok] + CHAIN_TOL))
    return {
        "lhs_mean": float(lhs[ok].mean()),
        "rhs_mean": float(rhs[ok].mean()),
        "holds": float(lhs[ok].mean()) <= float(rhs[ok].mean()) + CHAIN_TOL,
        "pointwise_violations": pointwise,
        "checked": int(ok.sum()),
        "flag_rate": float(flagged.mean()),
        "gamma": gamma,
        "joint_term": joint_term,
    }


def tradeoff_check(gt, partition: ClassPartition, latents: np.ndarray) -> dict:
    """Trade-off bound: the optimal class-wise scores against the true class
    posterior, bounded by the worst TV between a piece-averaged conditional
    and that posterior."""
    gt_mats = gt.attribute_posterior_batch(latents)
    gt_mass = it.neighborhood_mass_batch(gt_mats, partition)
    gt_contribs, sizes = _piece_contribs(gt.joint_table(), partition)
    opt_scores, fallback = _classwise_scores(gt_mass, gt_contribs, sizes)
    true_posterior = gt.class_posterior_batch(latents)
    lhs = tv_rows(opt_scores, true_posterior)
    nonempty = [y for y, n in enumerate(sizes) if n > 0]
    bars = np.stack([gt_contribs[y] / sizes[y] for y in nonempty], axis=0)
    rhs = np.max(
        0.5 * np.abs(bars[None, :, :] - true_posterior[:, None, :]).sum(axis=2), axis=1
    )
    ok = ~fallback
    pointwise = int(np.sum(lhs[ok] > rhs[ok] + CHAIN_TOL))
    return {
        "lhs_mean": float(lhs[ok].mean()),
        "rhs_mean": float(rhs[ok].mean()),
        "holds": float(lhs[ok].mean()) <= float(rhs[ok].mean()) + CHAIN_TOL,
        "pointwise_violations": pointwise,
        "checked": int(ok.sum()),
    }


# -- reporting -----------------------------------------------------------------

RECORD_FIELDS = [
    "sample_id",
    "tv_pred",
    "attr_joint_tv",
    "attr_sum_tv",
    "rnpc_tv",
    "rnpc_ratio_bound",
    "c_floor",
    "flagged",
]


def write_bound_records(path, records: list[BoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow(
                [
                    r.sample_id,
                    format(r.tv_pred, ".17g"),
                    format(r.attr_joint_tv, ".17g"),
                    format(r.attr_sum_tv, ".17g"),
                    format(r.rnpc_tv, ".17g"),
                    format(r.rnpc_ratio_bound, ".17g"),
                    format(r.c_floor, ".17g"),
                    int(r.flagged),
                ]
            )


def bound_summary(records: list[BoundRecord]) -> str:
    n = len(records)
    flags = sum(r.flagged for r in records)
    chain_bad = chain_violations(records)
    ratio_bad = ratio_violations(records)
    direct = direct_comparison_check(records)
    lines = [
        f"records: {n} (flagged: {flags}, flag rate {flags / n if n else 0.0:.4f})",
        f"node-wise chain: {'PASS' if chain_bad == 0 else 'FAIL'} ({chain_bad} violations)",
        f"class-wise ratio bound: {'PASS' if ratio_bad == 0 else 'FAIL'} ({ratio_bad} violations)",
        (
            "direct comparison: "
            f"{'PASS' if direct['violations'] == 0 else 'FAIL'} "
            f"({direct['violations']} violations / {direct['checked']} checked, "
            f"{direct['strong_checked']} with floor > 0.01)"
        ),
    ]
    return "\n".join(lines)
