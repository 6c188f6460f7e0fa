"""White-box untargeted attacks on the recognizer over a chosen attribute set.

PGD ascends the mean cross-entropy of the attacked attributes inside an
infinity- or 2-norm ball intersected with the unit box, and returns the
best-objective iterate it visited (so the objective at the output never falls
below the objective at the starting point). The CW attack minimizes a
squared-norm plus margin objective under a tanh box reparametrization, with a
per-sample geometric binary search over the trade-off constant; its norm is
measured, not enforced.

All randomness is seeded; batch calls vectorize across samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import recognizer as rec
from .schema import VariableSchema

NORM_LINF = "linf"
NORM_L2 = "l2"

PGD_LINF_STEP_DEFAULT = 2.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    norm: str = NORM_LINF
    bound: float = 0.11
    steps: int = 50
    step_size: float | None = None  # defaults: 2/255 (linf), 0.1 * bound (l2)
    attacked: tuple[int, ...] = (1,)
    random_start: bool = True
    seed: int = 0
    cw_binary_steps: int = 9
    cw_inner_lr: float = 0.01
    cw_c_init: float = 1e-2
    cw_c_lo: float = 1e-4
    cw_c_hi: float = 1e2

    def __post_init__(self):
        object.__setattr__(self, "attacked", tuple(int(k) for k in self.attacked))
        if self.norm not in (NORM_LINF, NORM_L2):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.bound < 0 or self.steps < 0:
            raise ValueError("bound and steps must be nonnegative")
        if not self.attacked:
            raise ValueError("attacked attribute set must be nonempty")

    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.norm == NORM_LINF:
            return PGD_LINF_STEP_DEFAULT
        return 0.1 * self.bound


@dataclass
class AdvPair:
    x: np.ndarray
    x_tilde: np.ndarray
    labels: np.ndarray
    class_label: int
    achieved_norm: float
    success: bool | None = None


def _norms(delta: np.ndarray, norm: str) -> np.ndarray:
    if norm == NORM_LINF:
        return np.abs(delta).max(axis=1)
    return np.sqrt((delta**2).sum(axis=1))


def _project(delta: np.ndarray, norm: str, bound: float) -> np.ndarray:
    if norm == NORM_LINF:
        return np.clip(delta, -bound, bound)
    lengths = np.sqrt((delta**2).sum(axis=1, keepdims=True))
    factor = np.minimum(1.0, bound / np.maximum(lengths, 1e-300))
    return delta * factor


def _random_start(rng, shape, norm: str, bound: float) -> np.ndarray:
    if bound == 0:
        return np.zeros(shape)
    if norm == NORM_LINF:
        return rng.uniform(-bound, bound, size=shape)
    direction = rng.normal(size=shape)
    direction /= np.maximum(np.sqrt((direction**2).sum(axis=1, keepdims=True)), 1e-300)
    radius = bound * rng.random(size=(shape[0], 1)) ** (1.0 / shape[1])
    return direction * radius


def pgd_batch(
    params: rec.RecognizerParams, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig
):
    """Projected gradient ascent on a batch; returns (x_tilde, achieved_norms).

    Keeps the iterate with the highest attack objective seen, including the
    projected starting point, so the returned objective never undercuts it.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    if cfg.random_start:
        delta = _random_start(rng, x.shape, cfg.norm, cfg.bound)
    else:
        delta = np.zeros_like(x)
    current = np.clip(x + _project(delta, cfg.norm, cfg.bound), 0.0, 1.0)
    best = current.copy()
    best_obj, _ = rec.attack_loss_and_grad(params, current, labels, cfg.attacked)
    step = cfg.effective_step()
    for _ in range(cfg.steps):
        obj, grad = rec.attack_loss_and_grad(params, current, labels, cfg.attacked)
        improve = obj > best_obj
        if improve.any():
            best[improve] = current[improve]
            best_obj[improve] = obj[improve]
        if cfg.norm == NORM_LINF:
            direction = np.sign(grad)
        else:
            direction = grad / np.maximum(
                np.sqrt((grad**2).sum(axis=1, keepdims=True)), 1e-300
            )
        current = current + step * direction
        current = np.clip(x + _project(current - x, cfg.norm, cfg.bound), 0.0, 1.0)
    obj, _ = rec.attack_loss_and_grad(params, current, labels, cfg.attacked)
    improve = obj > best_obj
    if improve.any():
        best[improve] = current[improve]
        best_obj[improve] = obj[improve]
    return best, _norms(best - x, cfg.norm)


def pgd(params: rec.RecognizerParams, x, labels, cfg: AttackConfig, class_label: int = -1) -> AdvPair:
    """Single-sample PGD; see :func:`pgd_batch`."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    x_tilde, norms = pgd_batch(params, x[None], labels[None], cfg)
    return AdvPair(
        x=x,
        x_tilde=x_tilde[0],
        labels=labels,
        class_label=class_label,
        achieved_norm=float(norms[0]),
    )


def _cw_margin_and_grad(params, x, labels, attacked):
    """Mean untargeted margin over attacked attributes and its input gradient.

    Per attribute: max(logit_true - max_other, 0); the gradient flows only
    through samples whose margin is still positive.
    """
    n = x.shape[0]
    m = len(attacked)
    margin = np.zeros(n)
    grad = np.zeros_like(x)
    flipped = np.ones(n, dtype=bool)
    for k in attacked:
        block = params.blocks[k - 1]
        xb, z1, a1, logits = rec._block_forward(block, x)
        idx = labels[:, k - 1]
        true_logit = logits[np.arange(n), idx]
        masked = logits.copy()
        masked[np.arange(n), idx] = -np.inf
        runner = masked.argmax(axis=1)
        other_logit = masked[np.arange(n), runner]
        gap = true_logit - other_logit
        flipped &= gap < 0
        active = gap > 0
        margin += np.maximum(gap, 0.0) / m
        dlogits = np.zeros_like(logits)
        rows = np.flatnonzero(active)
        dlogits[rows, idx[rows]] = 1.0 / m
        dlogits[rows, runner[rows]] = -1.0 / m
        da1 = dlogits @ block.w2
        dz1 = da1 * (z1 > 0)
        grad[:, block.input_slice[0] : block.input_slice[1]] += dz1 @ block.w1
    return margin, grad, flipped


def cw_l2_batch(params: rec.RecognizerParams, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig):
    """CW 2-norm attack on a batch; returns (x_tilde, norms, success).

    Minimizes ||delta||^2 + c * margin under a tanh change of variables that
    keeps iterates inside the unit box; c is tuned per sample by geometric
    bisection over ``cw_binary_steps`` rounds, keeping the smallest-norm
    successful perturbation (success means every attacked attribute flips).
    """
    if cfg.cw_binary_steps < 1:
        raise ValueError("cw_binary_steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    eps = 1e-6
    w0 = np.arctanh(np.clip(2 * x - 1, -1 + eps, 1 - eps))
    c = np.full(n, cfg.cw_c_init)
    c_lo = np.full(n, cfg.cw_c_lo)
    c_hi = np.full(n, cfg.cw_c_hi)
    best = x.copy()
    best_norm = np.full(n, np.inf)
    ever = np.zeros(n, dtype=bool)
    for _ in range(cfg.cw_binary_steps):
        w = w0.copy()
        round_best = None
        round_norm = np.full(n, np.inf)
        round_success = np.zeros(n, dtype=bool)
        for _ in range(cfg.steps):
            tanh_w = np.tanh(w)
            x_adv = 0.5 * (tanh_w + 1.0)
            delta = x_adv - x
            margin, g_margin, flipped = _cw_margin_and_grad(params, x_adv, labels, cfg.attacked)
            norms = np.sqrt((delta**2).sum(axis=1))
            better = flipped & (norms < round_norm)
            if better.any():
                if round_best is None:
                    round_best = x_adv.copy()
                else:
                    round_best[better] = x_adv[better]
                round_norm[better] = norms[better]
                round_success |= better
            dx = 2.0 * delta + c[:, None] * g_margin
            w = w - cfg.cw_inner_lr * dx * 0.5 * (1.0 - tanh_w**2)
        tanh_w = np.tanh(w)
        x_adv = 0.5 * (tanh_w + 1.0)
        _, _, flipped = _cw_margin_and_grad(params, x_adv, labels, cfg.attacked)
        norms = np.sqrt(((x_adv - x) ** 2).sum(axis=1))
        better = flipped & (norms < round_norm)
        if better.any():
            if round_best is None:
                round_best = x_adv.copy()
            else:
                round_best[better] = x_adv[better]
            round_norm[better] = norms[better]
            round_success |= better
        take = round_success & (round_norm < best_norm)
        if take.any():
            best[take] = round_best[take]
            best_norm[take] = round_norm[take]
        ever |= round_success
        # binary search: shrink c after a success, grow it after a failure
        c_hi[round_success] = c[round_success]
        c_lo[~round_success] = c[~round_success]
        c = np.sqrt(c_lo * c_hi)
    final = np.where(ever[:, None], best, x)
    return final, np.sqrt(((final - x) ** 2).sum(axis=1)), ever


def cw_l2(params: rec.RecognizerParams, x, labels, cfg: AttackConfig, class_label: int = -1) -> AdvPair:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    x_tilde, norms, success = cw_l2_batch(params, x[None], labels[None], cfg)
    return AdvPair(
        x=x,
        x_tilde=x_tilde[0],
        labels=labels,
        class_label=class_label,
        achieved_norm=float(norms[0]),
        success=bool(success[0]),
    )


def adversarial_train(
    data: tuple[np.ndarray, np.ndarray],
    schema: VariableSchema,
    recog_cfg: rec.TrainConfig,
    atk_cfg: AttackConfig,
    input_slices=None,
) -> rec.RecognizerParams:
    """Train on each batch plus PGD examples targeting one random attribute.

    The attacked attribute is drawn per batch from a stream seeded by the
    attack config, independent of the shuffle stream, so a zero-bound attack
    reproduces plain training on duplicated batches exactly.
    """
    x, labels = data
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if recog_cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    params = rec.init_params(schema, x.shape[1], recog_cfg.hidden_dim, recog_cfg.seed, input_slices)
    shuffle_rng = np.random.default_rng(recog_cfg.seed + 1)
    attack_rng = np.random.default_rng(atk_cfg.seed)
    velocities = [
        {name: np.zeros_like(getattr(b, name)) for name in ("w1", "b1", "w2", "b2")}
        for b in params.blocks
    ]
    blocks = list(params.blocks)
    n = len(x)
    k_attrs = schema.n_attributes
    for _ in range(recog_cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, recog_cfg.batch_size):
            take = order[start : start + recog_cfg.batch_size]
            bx, by = x[take], labels[take]
            target = int(attack_rng.integers(1, k_attrs + 1))
            step_seed = int(attack_rng.integers(0, 2**31))
            current = rec.RecognizerParams(schema, x.shape[1], tuple(blocks))
            adv, _ = pgd_batch(
                current, bx, by, replace(atk_cfg, attacked=(target,), seed=step_seed)
            )
            cx = np.vstack([bx, adv])
            cy = np.vstack([by, by])
            for k, block in enumerate(blocks):
                xb, z1, a1, logits = rec._block_forward(block, cx)
                p = rec._softmax(logits)
                blocks[k] = rec._sgd_step(
                    block,
                    xb,
                    z1,
                    a1,
                    p,
                    cy[:, k],
                    recog_cfg.learning_rate,
                    recog_cfg.momentum,
                    velocities[k],
                )
    return rec.RecognizerParams(schema=schema, input_dim=x.shape[1], blocks=tuple(blocks))


# -- serialization ------------------------------------------------------------

BINARY_HEADER = "ADV v1"


def save_adv_batch(csv_path, bin_path, pairs: list[AdvPair]) -> None:
    """CSV of metadata plus a binary sidecar with the perturbed vectors."""
    if pairs:
        d = len(pairs[0].x_tilde)
        k = len(pairs[0].labels)
    else:
        d = k = 0
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "class_label", "achieved_norm", "success"]
            + [f"label_{i}" for i in range(k)]
        )
        for i, pair in enumerate(pairs):
            writer.writerow(
                [i, pair.class_label, format(pair.achieved_norm, ".17g"), pair.success]
                + [int(v) for v in pair.labels]
            )
    with open(bin_path, "wb") as fh:
        fh.write(f"{BINARY_HEADER} rows {len(pairs)} dim {d}\n".encode("utf-8"))
        for pair in pairs:
            fh.write(np.asarray(pair.x_tilde, dtype="<f8").tobytes())


def load_adv_vectors(bin_path) -> np.ndarray:
    with open(bin_path, "rb") as fh:
        header = fh.readline().decode("utf-8").split()
        if " ".join(header[:2]) != BINARY_HEADER:
            raise ValueError(f"expected '{BINARY_HEADER}' header")
        n, d = int(header[3]), int(header[5])
        return np.frombuffer(fh.read(n * d * 8), dtype="<f8").reshape(n, d).copy()
