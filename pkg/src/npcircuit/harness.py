"""End-to-end experiment pipeline: data generation, training, circuit
learning, partitioning, attack sweeps, bound verification, and results.csv.

Stages are plain functions over artifacts in an output directory so the CLI
can run them separately or all at once. A master seed fans out to per-stage
seeds through a fixed hashing scheme; two runs with the same master seed
produce byte-identical results.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from . import circuit as pc
from . import datagen as dg
from . import geometry as geo
from . import integrator as it
from . import metrics as mx
from . import recognizer as rec
from .errors import MissingArtifacts
from .learnspn import StructureHyperparams, fit_parameters_cccp, learn_structure
from .schema import VariableSchema

MODE_NPC = "npc"
MODE_RNPC = "rnpc"
MODE_CBM = "cbm"


def stage_seed(master: int, name: str) -> int:
    return int((master * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2**31 - 1))


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "mnist-add3-like"
    out_dir: str = "run-artifacts"
    master_seed: int = 0
    n_train: int = 6000
    n_test: int = 2000
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    hidden_dim: int = 64
    cccp_iters: int = 30
    gamma: float | None = None  # default 0.5 / number of planted nodes
    modes: tuple[str, ...] = (MODE_NPC, MODE_RNPC, MODE_CBM)
    attack_norm: str = atk.NORM_LINF
    attack_bounds: tuple[float, ...] = (0.0, 0.03, 0.05, 0.07, 0.09, 0.11)
    attack_steps: int = 50
    attacked_sets: tuple[tuple[int, ...], ...] | None = None  # default: singletons
    radius_list: tuple[int, ...] | None = None
    dp: dict | None = None  # {"eps", "delta", "n_draws", "bound"}
    cbm_epochs: int = 60
    cbm_learning_rate: float = 0.2

    def resolved_attacked_sets(self, k_attrs: int) -> tuple[tuple[int, ...], ...]:
        if self.attacked_sets is not None:
            return tuple(tuple(int(v) for v in s) for s in self.attacked_sets)
        return tuple((k,) for k in range(1, k_attrs + 1))


def config_to_json(cfg: ExperimentConfig) -> str:
    d = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in cfg.__dict__.items()
    }
    if cfg.attacked_sets is not None:
        d["attacked_sets"] = [list(s) for s in cfg.attacked_sets]
    return json.dumps(d, indent=2, sort_keys=True)


def config_from_json(text: str) -> ExperimentConfig:
    d = json.loads(text)
    for key in ("modes", "attack_bounds", "radius_list"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    if d.get("attacked_sets") is not None:
        d["attacked_sets"] = tuple(tuple(s) for s in d["attacked_sets"])
    return ExperimentConfig(**d)


# -- CBM-lite baseline ----------------------------------------------------------


@dataclass(frozen=True)
class CbmLiteModel:
    """Linear class head over the concatenated attribute probability vectors."""

    schema: VariableSchema
    n_classes: int
    weights: np.ndarray  # (n_classes, sum of cardinalities)
    bias: np.ndarray


def _concat_probs(prob_mats: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(prob_mats, axis=1)


def train_cbm_lite(
    prob_mats: list[np.ndarray],
    labels: np.ndarray,
    schema: VariableSchema,
    n_classes: int,
    epochs: int = 60,
    learning_rate: float = 0.2,
    batch_size: int = 256,
    seed: int = 0,
) -> CbmLiteModel:
    """Softmax cross-entropy SGD on a frozen recognizer's outputs."""
    feats = _concat_probs(prob_mats)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    w = np.zeros((n_classes, feats.shape[1]))
    b = np.zeros(n_classes)
    n = len(feats)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            fx, fy = feats[take], labels[take]
            logits = fx @ w.T + b
            p = rec._softmax(logits)
            p[np.arange(len(take)), fy] -= 1.0
            p /= len(take)
            w -= learning_rate * (p.T @ fx)
            b -= learning_rate * p.sum(axis=0)
    return CbmLiteModel(schema=schema, n_classes=n_classes, weights=w, bias=b)


def cbm_infer_batch(model: CbmLiteModel, prob_mats: list[np.ndarray]) -> np.ndarray:
    logits = _concat_probs(prob_mats) @ model.weights.T + model.bias
    return rec._softmax(logits)


def cbm_infer(model: CbmLiteModel, probs) -> it.ClassScores:
    mats = [np.asarray(p)[None, :] for p in it._as_prob_list(probs)]
    normalized = cbm_infer_batch(model, mats)[0]
    return it.ClassScores(
        mode=MODE_CBM,
        unnormalized=normalized,
        partition_value=1.0,
        normalized=normalized,
        counter=it.QueryCounter(circuit_conditional_queries=0, recognizer_forwards=1),
    )


CBM_HEADER = "CBMHEAD v1"


def save_cbm(model: CbmLiteModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(CBM_HEADER + "\n")
        fh.write(
            "schema "
            + str(model.schema.class_cardinality)
            + " "
            + " ".join(str(c) for c in model.schema.attribute_cardinalities)
            + "\n"
        )
        fh.write(f"dims {model.n_classes} {model.weights.shape[1]}\n")
        fh.write("w " + " ".join(format(v, ".17g") for v in model.weights.ravel()) + "\n")
        fh.write("b " + " ".join(format(v, ".17g") for v in model.bias) + "\n")


def load_cbm(path) -> CbmLiteModel:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if lines[0] != CBM_HEADER:
        raise ValueError(f"expected '{CBM_HEADER}' header")
    parts = lines[1].split()
    schema = VariableSchema(int(parts[1]), tuple(int(c) for c in parts[2:]))
    n_classes, dim = (int(v) for v in lines[2].split()[1:])
    w = np.array([float(v) for v in lines[3].split()[1:]]).reshape(n_classes, dim)
    b = np.array([float(v) for v in lines[4].split()[1:]])
    return CbmLiteModel(schema=schema, n_classes=n_classes, weights=w, bias=b)


# -- pipeline stages -------------------------------------------------------------


class Paths:
    def __init__(self, out_dir: str):
        self.out = out_dir
        self.config = os.path.join(out_dir, "config.json")
        self.train_data = os.path.join(out_dir, "data_train.dset")
        self.test_data = os.path.join(out_dir, "data_test.dset")
        self.recognizer = os.path.join(out_dir, "recognizer.recog")
        self.circuit = os.path.join(out_dir, "circuit.pc")
        self.circuit_ll = os.path.join(out_dir, "circuit_ll.txt")
        self.partition = os.path.join(out_dir, "partition.part")
        self.cbm = os.path.join(out_dir, "cbm.head")
        self.results = os.path.join(out_dir, "results.csv")
        self.bounds_summary = os.path.join(out_dir, "bounds_summary.txt")
        self.report = os.path.join(out_dir, "report.md")

    def adv(self, tag: str) -> tuple[str, str]:
        return (
            os.path.join(self.out, f"adv_{tag}.csv"),
            os.path.join(self.out, f"adv_{tag}.bin"),
        )

    def eval_csv(self, mode: str, tag: str) -> str:
        return os.path.join(self.out, f"eval_{mode}_{tag}.csv")

    def records(self, tag: str) -> str:
        return os.path.join(self.out, f"bound_records_{tag}.csv")


def attack_tag(norm: str, bound: float, attacked: tuple[int, ...]) -> str:
    return f"{norm}_{format(float(bound), 'g')}_{'+'.join(str(k) for k in attacked)}"


def resolve_spec(cfg: ExperimentConfig) -> dg.GeneratorSpec:
    table = dg.presets()
    if cfg.preset not in table:
        raise ValueError(f"unknown preset {cfg.preset!r}; choices: {sorted(table)}")
    return table[cfg.preset]


def stage_gen_data(cfg: ExperimentConfig, paths: Paths) -> tuple[dg.Dataset, dg.Dataset]:
    spec = resolve_spec(cfg)
    train_ds = dg.generate(spec, cfg.n_train, seed=stage_seed(cfg.master_seed, "gen-train"))
    test_ds = dg.generate(spec, cfg.n_test, seed=stage_seed(cfg.master_seed, "gen-test"))
    dg.save_dataset(train_ds, paths.train_data)
    dg.save_dataset(test_ds, paths.test_data)
    return train_ds, test_ds


def stage_train(cfg: ExperimentConfig, paths: Paths, train_ds: dg.Dataset) -> rec.RecognizerParams:
    tcfg = rec.TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        hidden_dim=cfg.hidden_dim,
        seed=stage_seed(cfg.master_seed, "train"),
    )
    params = rec.train(
        (train_ds.x, train_ds.attributes),
        train_ds.spec.schema,
        tcfg,
        input_slices=train_ds.spec.recognizer_slices(),
    )
    rec.save_params(params, paths.recognizer)
    return params


def stage_learn_circuit(cfg: ExperimentConfig, paths: Paths, train_ds: dg.Dataset) -> pc.Circuit:
    hp = StructureHyperparams(seed=stage_seed(cfg.master_seed, "circuit"))
    circuit = learn_structure(train_ds.rows, train_ds.spec.schema, hp)
    circuit, history = fit_parameters_cccp(circuit, train_ds.rows, iters=cfg.cccp_iters)
    pc.save_circuit(circuit, paths.circuit)
    with open(paths.circuit_ll, "w") as fh:
        fh.write("\n".join(format(v, ".17g") for v in history) + "\n")
    return circuit


def stage_partition(cfg: ExperimentConfig, paths: Paths, train_ds: dg.Dataset) -> geo.ClassPartition:
    spec = train_ds.spec
    gamma = cfg.gamma if cfg.gamma is not None else 0.5 / len(spec.planted_nodes)
    v = geo.build_high_prob_set(train_ds.attributes, spec.schema, gamma)
    partition = geo.partition_by_class(v, train_ds.attributes, train_ds.labels)
    geo.save_partition(partition, paths.partition)
    return partition


def stage_cbm(
    cfg: ExperimentConfig, paths: Paths, params: rec.RecognizerParams, train_ds: dg.Dataset
) -> CbmLiteModel:
    mats = rec.forward_batch(params, train_ds.x)
    model = train_cbm_lite(
        mats,
        train_ds.labels,
        train_ds.spec.schema,
        train_ds.spec.n_classes,
        epochs=cfg.cbm_epochs,
        learning_rate=cfg.cbm_learning_rate,
        batch_size=cfg.batch_size,
        seed=stage_seed(cfg.master_seed, "cbm"),
    )
    save_cbm(model, paths.cbm)
    return model


RESULT_COLUMNS = [
    "mode",
    "norm",
    "bound",
    "attacked",
    "benign_acc",
    "adv_acc",
    "mean_tv",
    "mean_attr_joint_tv",
    "mean_attr_sum_tv",
    "mean_ratio_bound",
    "min_c_floor",
    "flag_rate",
    "chain_violations",
    "ratio_violations",
    "direct_violations",
    "space_size",
    "v_size",
    "cond_queries_per_sample",
    "constant_predictions",
    "n_samples",
]


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


@dataclass
class RunResult:
    rows: list[dict]
    records_by_tag: dict[str, list[mx.BoundRecord]] = field(default_factory=dict)

    @property
    def bound_violations(self) -> int:
        total = 0
        for row in self.rows:
            for col in ("chain_violations", "ratio_violations", "direct_violations"):
                value = row.get(col, "")
                if value != "" and int(value) > 0:
                    total += int(value)
        return total


def write_results(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col, "")) for col in RESULT_COLUMNS])


def read_results(path) -> list[dict]:
    if not os.path.exists(path):
        raise MissingArtifacts(f"{path} not found; run the pipeline first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(cfg: ExperimentConfig) -> RunResult:
    """Full pipeline; emits per-stage artifacts plus results.csv."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = Paths(cfg.out_dir)
    with open(paths.config, "w") as fh:
        fh.write(config_to_json(cfg) + "\n")

    train_ds, test_ds = stage_gen_data(cfg, paths)
    spec = train_ds.spec
    schema = spec.schema
    k_attrs = schema.n_attributes
    params = stage_train(cfg, paths, train_ds)
    circuit = stage_learn_circuit(cfg, paths, train_ds)
    partition = stage_partition(cfg, paths, train_ds)
    cache = it.CircuitCache(circuit)
    cbm_model = stage_cbm(cfg, paths, params, train_ds) if MODE_CBM in cfg.modes else None

    benign_mats = rec.forward_batch(params, test_ds.x)
    benign_scores: dict[str, np.ndarray] = {}
    if MODE_NPC in cfg.modes:
        benign_scores[MODE_NPC] = it.npc_infer_batch(benign_mats, circuit, cache)
    if MODE_RNPC in cfg.modes:
        benign_scores[MODE_RNPC], _ = it.rnpc_infer_batch(benign_mats, circuit, partition, cache=cache)
    if cbm_model is not None:
        benign_scores[MODE_CBM] = cbm_infer_batch(cbm_model, benign_mats)
    benign_acc = {
        mode: mx.accuracy(scores.argmax(axis=1), test_ds.labels)
        for mode, scores in benign_scores.items()
    }
    for mode, scores in benign_scores.items():
        it.write_scores_csv(
            paths.eval_csv(mode, "benign"),
            range(len(test_ds)),
            mode,
            scores.argmax(axis=1),
            test_ds.labels,
            scores,
        )

    space = schema.attribute_space_size
    v_size = len(partition.all_nodes)
    queries = {MODE_NPC: space, MODE_RNPC: v_size, MODE_CBM: 0}

    result = RunResult(rows=[])

    def add_row(mode, norm, bound, attacked_label, adv_acc, mean_tv, extra=None, n_samples=None):
        row = {
            "mode": mode,
            "norm": norm,
            "bound": bound,
            "attacked": attacked_label,
            "benign_acc": benign_acc.get(mode.split("@")[0].split("+")[0], ""),
            "adv_acc": adv_acc,
            "mean_tv": mean_tv,
            "space_size": space,
            "v_size": v_size,
            "cond_queries_per_sample": queries.get(mode.split("@")[0].split("+")[0], 0),
            "constant_predictions": "",
            "n_samples": len(test_ds) if n_samples is None else n_samples,
        }
        row.update(extra or {})
        result.rows.append(row)
        return row

    attacked_sets = cfg.resolved_attacked_sets(k_attrs)
    for bound in cfg.attack_bounds:
        for attacked in attacked_sets:
            tag = attack_tag(cfg.attack_norm, bound, attacked)
            acfg = atk.AttackConfig(
                norm=cfg.attack_norm,
                bound=float(bound),
                steps=cfg.attack_steps,
                attacked=attacked,
                seed=stage_seed(cfg.master_seed, f"attack-{tag}"),
            )
            adv_x, norms = atk.pgd_batch(params, test_ds.x, test_ds.attributes, acfg)
            pairs_csv, pairs_bin = paths.adv(tag)
            pairs = [
                atk.AdvPair(
                    x=test_ds.x[i],
                    x_tilde=adv_x[i],
                    labels=test_ds.attributes[i],
                    class_label=int(test_ds.labels[i]),
                    achieved_norm=float(norms[i]),
                )
                for i in range(len(adv_x))
            ]
            atk.save_adv_batch(pairs_csv, pairs_bin, pairs)
            adv_mats = rec.forward_batch(params, adv_x)

            records = mx.bound_records(benign_mats, adv_mats, circuit, partition, cache)
            result.records_by_tag[tag] = records
            mx.write_bound_records(paths.records(tag), records)
            flags = np.mean([r.flagged for r in records]) if records else 0.0
            finite_ratio = [r.rnpc_ratio_bound for r in records if not r.flagged]
            direct = mx.direct_comparison_check(records)
            shared = {
                "mean_attr_joint_tv": float(np.mean([r.attr_joint_tv for r in records])),
                "mean_attr_sum_tv": float(np.mean([r.attr_sum_tv for r in records])),
                "flag_rate": float(flags),
                "min_c_floor": float(min(r.c_floor for r in records)),
            }

            if MODE_NPC in cfg.modes:
                scores = it.npc_infer_batch(adv_mats, circuit, cache)
                add_row(
                    MODE_NPC,
                    cfg.attack_norm,
                    bound,
                    "+".join(map(str, attacked)),
                    mx.accuracy(scores.argmax(axis=1), test_ds.labels),
                    float(np.mean([r.tv_pred for r in records])),
                    dict(
                        shared,
                        chain_violations=mx.chain_violations(records),
                        ratio_violations="",
                        direct_violations="",
                    ),
                )
            if MODE_RNPC in cfg.modes:
                scores, _ = it.rnpc_infer_batch(adv_mats, circuit, partition, cache=cache)
                add_row(
                    MODE_RNPC,
                    cfg.attack_norm,
                    bound,
                    "+".join(map(str, attacked)),
                    mx.accuracy(scores.argmax(axis=1), test_ds.labels),
                    float(np.mean([r.rnpc_tv for r in records])),
                    dict(
                        shared,
                        mean_ratio_bound=float(np.mean(finite_ratio)) if finite_ratio else "",
                        chain_violations="",
                        ratio_violations=mx.ratio_violations(records),
                        direct_violations=direct["violations"],
                    ),
                )
            if cbm_model is not None:
                scores = cbm_infer_batch(cbm_model, adv_mats)
                add_row(
                    MODE_CBM,
                    cfg.attack_norm,
                    bound,
                    "+".join(map(str, attacked)),
                    mx.accuracy(scores.argmax(axis=1), test_ds.labels),
                    float(np.mean(mx.tv_rows(benign_scores[MODE_CBM], scores))),
                    dict(shared, chain_violations="", ratio_violations="", direct_violations=""),
                )

    if cfg.radius_list:
        bound = cfg.attack_bounds[-1]
        attacked = attacked_sets[0]
        tag = attack_tag(cfg.attack_norm, bound, attacked)
        _, pairs_bin = paths.adv(tag)
        adv_x = atk.load_adv_vectors(pairs_bin)
        adv_mats = rec.forward_batch(params, adv_x)
        for r in cfg.radius_list:
            swept = geo.with_radius(partition, r, include_other_pieces=True)
            b_scores, _ = it.rnpc_infer_batch(benign_mats, circuit, swept, cache=cache)
            a_scores, _ = it.rnpc_infer_batch(adv_mats, circuit, swept, cache=cache)
            preds_b = b_scores.argmax(axis=1)
            constant = bool(np.all(preds_b == preds_b[0]) and np.all(a_scores.argmax(axis=1) == preds_b[0]))
            row = add_row(
                f"rnpc@r{r}",
                cfg.attack_norm,
                bound,
                "+".join(map(str, attacked)),
                mx.accuracy(a_scores.argmax(axis=1), test_ds.labels),
                float(np.mean(mx.tv_rows(b_scores, a_scores))),
                {
                    "chain_violations": "",
                    "ratio_violations": "",
                    "direct_violations": "",
                },
            )
            row["benign_acc"] = mx.accuracy(preds_b, test_ds.labels)
            row["constant_predictions"] = int(constant)
            row["cond_queries_per_sample"] = v_size

    if cfg.dp:
        dp = cfg.dp
        sigma = mx.dp_sigma(dp["eps"], dp["delta"], dp["bound"])
        smoothed = mx.dp_wrap(
            params, sigma, dp["n_draws"], seed=stage_seed(cfg.master_seed, "dp")
        )
        acfg = atk.AttackConfig(
            norm=atk.NORM_L2,
            bound=float(dp["bound"]),
            steps=cfg.attack_steps,
            attacked=attacked_sets[0],
            seed=stage_seed(cfg.master_seed, "attack-dp"),
        )
        adv_x, _ = atk.pgd_batch(params, test_ds.x, test_ds.attributes, acfg)
        sm_benign = smoothed.forward_batch(test_ds.x)
        sm_adv = smoothed.forward_batch(adv_x)
        for mode, infer in (
            (MODE_NPC, lambda m: it.npc_infer_batch(m, circuit, cache)),
            (MODE_RNPC, lambda m: it.rnpc_infer_batch(m, circuit, partition, cache=cache)[0]),
        ):
            b_scores = infer(sm_benign)
            a_scores = infer(sm_adv)
            row = add_row(
                f"{mode}+dp",
                atk.NORM_L2,
                dp["bound"],
                "+".join(map(str, attacked_sets[0])),
                mx.accuracy(a_scores.argmax(axis=1), test_ds.labels),
                float(np.mean(mx.tv_rows(b_scores, a_scores))),
                {"chain_violations": "", "ratio_violations": "", "direct_violations": ""},
            )
            row["benign_acc"] = mx.accuracy(b_scores.argmax(axis=1), test_ds.labels)

    write_results(paths.results, result.rows)
    all_records = [r for recs in result.records_by_tag.values() for r in recs]
    with open(paths.bounds_summary, "w") as fh:
        if all_records:
            fh.write(mx.bound_summary(all_records) + "\n")
        else:
            fh.write("no attacked samples; bound checks not evaluated\n")
    return result
