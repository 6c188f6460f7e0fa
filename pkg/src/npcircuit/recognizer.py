"""Per-attribute two-layer softmax perceptrons with exact input gradients.

One independent block per attribute maps the input feature vector through a
rectified hidden layer to a probability vector over that attribute's values.
Training minimizes the sum of cross-entropy losses over all attributes with
mini-batch SGD plus momentum; everything is deterministic given the seed.

Blocks may restrict themselves to a contiguous slice of the input (the
feature block that carries their attribute); the gradient with respect to the
full input is exact either way, with zeros outside a block's slice.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch
from .schema import VariableSchema


@dataclass(frozen=True)
class AttributeBlock:
    """Parameters of one attribute's perceptron."""

    w1: np.ndarray  # (hidden, block_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (cardinality, hidden)
    b2: np.ndarray  # (cardinality,)
    input_slice: tuple[int, int]  # [start, stop) into the input vector


@dataclass(frozen=True)
class RecognizerParams:
    schema: VariableSchema
    input_dim: int
    blocks: tuple[AttributeBlock, ...]

    @property
    def hidden_dim(self) -> int:
        return self.blocks[0].w1.shape[0]


@dataclass(frozen=True)
class AttributeProbs:
    """One probability vector per attribute for a single input."""

    probs: tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(self.probs)

    def __getitem__(self, k):
        return self.probs[k]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    hidden_dim: int = 64
    adversarial_mix: object | None = None  # AttackConfig, consumed by attacks.adversarial_train


def init_params(
    schema: VariableSchema,
    input_dim: int,
    hidden_dim: int = 64,
    seed: int = 0,
    input_slices: list[tuple[int, int]] | None = None,
) -> RecognizerParams:
    """Uniform +-1/sqrt(fan_in) initialization from the seed."""
    rng = np.random.default_rng(seed)
    blocks = []
    for k, card in enumerate(schema.attribute_cardinalities):
        sl = (0, input_dim) if input_slices is None else tuple(input_slices[k])
        d = sl[1] - sl[0]
        lim1 = 1.0 / np.sqrt(d)
        lim2 = 1.0 / np.sqrt(hidden_dim)
        blocks.append(
            AttributeBlock(
                w1=rng.uniform(-lim1, lim1, size=(hidden_dim, d)),
                b1=rng.uniform(-lim1, lim1, size=hidden_dim),
                w2=rng.uniform(-lim2, lim2, size=(card, hidden_dim)),
                b2=rng.uniform(-lim2, lim2, size=card),
                input_slice=sl,
            )
        )
    return RecognizerParams(schema=schema, input_dim=input_dim, blocks=tuple(blocks))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _block_forward(block: AttributeBlock, x2d: np.ndarray):
    xb = x2d[:, block.input_slice[0] : block.input_slice[1]]
    z1 = xb @ block.w1.T + block.b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ block.w2.T + block.b2
    return xb, z1, a1, logits


def forward_batch(params: RecognizerParams, x: np.ndarray) -> list[np.ndarray]:
    """Per-attribute probability matrices for a batch, k-th of shape (n, |A_k|)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"expected (n, {params.input_dim}) input, got {x.shape}")
    return [_softmax(_block_forward(b, x)[3]) for b in params.blocks]


def forward(params: RecognizerParams, x: np.ndarray) -> AttributeProbs:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise DimensionMismatch(f"expected a length-{params.input_dim} vector, got {x.shape}")
    mats = forward_batch(params, x[None, :])
    return AttributeProbs(probs=tuple(m[0] for m in mats))


def attack_loss_and_grad(
    params: RecognizerParams, x: np.ndarray, labels: np.ndarray, attacked: tuple[int, ...]
):
    """Mean cross-entropy over the attacked attributes and its input gradient.

    ``x`` is (n, d), ``labels`` is (n, K) with values in each attribute's
    range, ``attacked`` holds 1-based attribute indices. Returns
    ``(loss (n,), grad (n, d))``; the gradient is the exact analytic one.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"expected (n, {params.input_dim}) input, got {x.shape}")
    if not attacked:
        raise ValueError("attacked attribute set must be nonempty")
    n = x.shape[0]
    m = len(attacked)
    loss = np.zeros(n)
    grad = np.zeros_like(x)
    for k in attacked:
        block = params.blocks[k - 1]
        xb, z1, a1, logits = _block_forward(block, x)
        p = _softmax(logits)
        idx = labels[:, k - 1]
        loss += -np.log(np.maximum(p[np.arange(n), idx], 1e-300)) / m
        dlogits = p.copy()
        dlogits[np.arange(n), idx] -= 1.0
        dlogits /= m
        da1 = dlogits @ block.w2
        dz1 = da1 * (z1 > 0)
        grad[:, block.input_slice[0] : block.input_slice[1]] += dz1 @ block.w1
    return loss, grad


def input_gradient(
    params: RecognizerParams, x: np.ndarray, labels, attacked: tuple[int, ...]
) -> np.ndarray:
    """Gradient of the mean attacked-attribute cross-entropy at a single input."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, grad = attack_loss_and_grad(params, x[None, :], labels[None, :], tuple(attacked))
    return grad[0]


def sum_cross_entropy(params: RecognizerParams, x: np.ndarray, labels: np.ndarray) -> float:
    """Mean over samples of the summed per-attribute cross-entropy."""
    mats = forward_batch(params, x)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    total = 0.0
    for k, p in enumerate(mats):
        total += float(
            -np.mean(np.log(np.maximum(p[np.arange(n), labels[:, k]], 1e-300)))
        )
    return total


def _sgd_step(block: AttributeBlock, xb, z1, a1, p, idx, lr, mu, vel):
    n = len(idx)
    dlogits = p.copy()
    dlogits[np.arange(n), idx] -= 1.0
    dlogits /= n
    grads = {
        "w2": dlogits.T @ a1,
        "b2": dlogits.sum(axis=0),
    }
    da1 = dlogits @ block.w2
    dz1 = da1 * (z1 > 0)
    grads["w1"] = dz1.T @ xb
    grads["b1"] = dz1.sum(axis=0)
    new = {}
    for name in ("w1", "b1", "w2", "b2"):
        vel[name] = mu * vel[name] - lr * grads[name]
        new[name] = getattr(block, name) + vel[name]
    return replace(block, **new)


def train(
    data: tuple[np.ndarray, np.ndarray],
    schema: VariableSchema,
    cfg: TrainConfig,
    input_slices: list[tuple[int, int]] | None = None,
) -> RecognizerParams:
    """Mini-batch SGD with momentum on the summed cross-entropy.

    ``data`` is ``(x, attribute_labels)`` with shapes (n, d) and (n, K).
    Deterministic given the seed: fixed shuffle order, fixed reduction order.
    """
    x, labels = data
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("training data is empty")
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if cfg.learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    params = init_params(schema, x.shape[1], cfg.hidden_dim, cfg.seed, input_slices)
    rng = np.random.default_rng(cfg.seed + 1)
    velocities = [
        {name: np.zeros_like(getattr(b, name)) for name in ("w1", "b1", "w2", "b2")}
        for b in params.blocks
    ]
    blocks = list(params.blocks)
    n = len(x)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            bx, by = x[take], labels[take]
            for k, block in enumerate(blocks):
                xb, z1, a1, logits = _block_forward(block, bx)
                p = _softmax(logits)
                blocks[k] = _sgd_step(
                    block, xb, z1, a1, p, by[:, k], cfg.learning_rate, cfg.momentum, velocities[k]
                )
    return RecognizerParams(schema=schema, input_dim=x.shape[1], blocks=tuple(blocks))


def attribute_argmax(params: RecognizerParams, x: np.ndarray) -> np.ndarray:
    """Predicted value per attribute for a batch, shape (n, K)."""
    mats = forward_batch(params, x)
    return np.column_stack([m.argmax(axis=1) for m in mats])


# -- serialization ------------------------------------------------------------

FORMAT_HEADER = "RECOG v1"


def _fmt_row(arr: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(arr).ravel())


def params_to_text(params: RecognizerParams) -> str:
    schema = params.schema
    lines = [FORMAT_HEADER]
    lines.append(
        "schema "
        + str(schema.class_cardinality)
        + " "
        + " ".join(str(c) for c in schema.attribute_cardinalities)
    )
    lines.append(f"input_dim {params.input_dim}")
    for k, b in enumerate(params.blocks):
        hidden, d = b.w1.shape
        card = b.w2.shape[0]
        lines.append(
            f"block {k} hidden {hidden} dim {d} card {card} "
            f"slice {b.input_slice[0]} {b.input_slice[1]}"
        )
        lines.append("w1 " + _fmt_row(b.w1))
        lines.append("b1 " + _fmt_row(b.b1))
        lines.append("w2 " + _fmt_row(b.w2))
        lines.append("b2 " + _fmt_row(b.b2))
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> RecognizerParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError(f"expected '{FORMAT_HEADER}' header")
    parts = lines[1].split()
    schema = VariableSchema(int(parts[1]), tuple(int(c) for c in parts[2:]))
    input_dim = int(lines[2].split()[1])
    blocks = []
    i = 3
    while i < len(lines):
        head = lines[i].split()
        hidden, d, card = int(head[3]), int(head[5]), int(head[7])
        sl = (int(head[9]), int(head[10]))
        w1 = np.array([float(v) for v in lines[i + 1].split()[1:]]).reshape(hidden, d)
        b1 = np.array([float(v) for v in lines[i + 2].split()[1:]])
        w2 = np.array([float(v) for v in lines[i + 3].split()[1:]]).reshape(card, hidden)
        b2 = np.array([float(v) for v in lines[i + 4].split()[1:]])
        blocks.append(AttributeBlock(w1=w1, b1=b1, w2=w2, b2=b2, input_slice=sl))
        i += 5
    return RecognizerParams(schema=schema, input_dim=input_dim, blocks=tuple(blocks))


def save_params(params: RecognizerParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(params_to_text(params))


def load_params(path) -> RecognizerParams:
    with open(path) as fh:
        return params_from_text(fh.read())
