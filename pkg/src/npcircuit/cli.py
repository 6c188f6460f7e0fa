"""Command-line interface over the experiment pipeline.

Stages can run one at a time against a shared output directory (gen-data
writes the resolved config there; later stages read it back) or all at once
with ``run``. The process exits nonzero if any enabled bound assertion fails.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attacks as atk
from . import circuit as pc
from . import datagen as dg
from . import geometry as geo
from . import harness as hn
from . import integrator as it
from . import metrics as mx
from . import recognizer as rec
from .errors import MissingArtifacts
from .report import write_report


def _load_config(out_dir: str) -> hn.ExperimentConfig:
    path = hn.Paths(out_dir).config
    if not os.path.exists(path):
        raise MissingArtifacts(f"{path} not found; run gen-data (or run) first")
    with open(path) as fh:
        return hn.config_from_json(fh.read())


def _config_from_args(args) -> hn.ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = hn.config_from_json(fh.read())
        overrides = {}
        if args.out:
            overrides["out_dir"] = args.out
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if overrides:
            cfg = hn.ExperimentConfig(**{**cfg.__dict__, **overrides})
        return cfg
    return hn.ExperimentConfig(
        preset=args.preset,
        out_dir=args.out or "run-artifacts",
        master_seed=args.seed if args.seed is not None else 0,
        n_train=args.n_train,
        n_test=args.n_test,
    )


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = hn.Paths(cfg.out_dir)
    with open(paths.config, "w") as fh:
        fh.write(hn.config_to_json(cfg) + "\n")
    train_ds, test_ds = hn.stage_gen_data(cfg, paths)
    print(f"wrote {paths.train_data} ({len(train_ds)} rows), {paths.test_data} ({len(test_ds)} rows)")
    return 0


def cmd_train(args) -> int:
    args.out = args.out or "run-artifacts"
    cfg = _load_config(args.out)
    paths = hn.Paths(args.out)
    train_ds = dg.load_dataset(paths.train_data)
    hn.stage_train(cfg, paths, train_ds)
    print(f"wrote {paths.recognizer}")
    return 0


def cmd_learn_circuit(args) -> int:
    args.out = args.out or "run-artifacts"
    cfg = _load_config(args.out)
    paths = hn.Paths(args.out)
    train_ds = dg.load_dataset(paths.train_data)
    circuit = hn.stage_learn_circuit(cfg, paths, train_ds)
    report = pc.validate(circuit)
    print(f"wrote {paths.circuit} ({len(circuit.nodes)} nodes, valid={report.valid})")
    return 0


def cmd_partition(args) -> int:
    args.out = args.out or "run-artifacts"
    cfg = _load_config(args.out)
    if args.gamma is not None:
        cfg = hn.ExperimentConfig(**{**cfg.__dict__, "gamma": args.gamma})
    paths = hn.Paths(args.out)
    train_ds = dg.load_dataset(paths.train_data)
    partition = hn.stage_partition(cfg, paths, train_ds)
    print(
        f"wrote {paths.partition} (|V|={len(partition.all_nodes)}, "
        f"d_min={partition.d_min}, r={partition.radius})"
    )
    return 0


def cmd_attack(args) -> int:
    args.out = args.out or "run-artifacts"
    cfg = _load_config(args.out)
    paths = hn.Paths(args.out)
    test_ds = dg.load_dataset(paths.test_data)
    params = rec.load_params(paths.recognizer)
    attacked = tuple(int(v) for v in args.attacked.split(","))
    tag = hn.attack_tag(args.norm, args.bound, attacked)
    acfg = atk.AttackConfig(
        norm=args.norm,
        bound=args.bound,
        steps=args.steps,
        attacked=attacked,
        seed=hn.stage_seed(cfg.master_seed, f"attack-{tag}"),
    )
    adv_x, norms = atk.pgd_batch(params, test_ds.x, test_ds.attributes, acfg)
    csv_path, bin_path = paths.adv(tag)
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
    atk.save_adv_batch(csv_path, bin_path, pairs)
    preds = rec.attribute_argmax(params, adv_x)
    accs = mx.attribute_accuracy(preds, test_ds.attributes)
    print(f"wrote {bin_path}; attacked-attribute accuracy: "
          + ", ".join(f"A{k}={accs[k - 1]:.3f}" for k in attacked))
    return 0


def _load_models(paths: hn.Paths):
    test_ds = dg.load_dataset(paths.test_data)
    params = rec.load_params(paths.recognizer)
    circuit = pc.load_circuit(paths.circuit)
    partition = geo.load_partition(paths.partition)
    return test_ds, params, circuit, partition


def cmd_eval(args) -> int:
    args.out = args.out or "run-artifacts"
    paths = hn.Paths(args.out)
    test_ds, params, circuit, partition = _load_models(paths)
    if args.adv:
        _, bin_path = paths.adv(args.adv)
        x = atk.load_adv_vectors(bin_path)
        tag = args.adv
    else:
        x, tag = test_ds.x, "benign"
    mats = rec.forward_batch(params, x)
    if args.mode == hn.MODE_NPC:
        scores = it.npc_infer_batch(mats, circuit)
    elif args.mode == hn.MODE_RNPC:
        scores, _ = it.rnpc_infer_batch(mats, circuit, partition)
    elif args.mode == hn.MODE_CBM:
        scores = hn.cbm_infer_batch(hn.load_cbm(paths.cbm), mats)
    else:
        raise ValueError(f"unknown mode {args.mode!r}")
    preds = scores.argmax(axis=1)
    out_csv = paths.eval_csv(args.mode, tag)
    it.write_scores_csv(out_csv, range(len(x)), args.mode, preds, test_ds.labels, scores)
    print(f"wrote {out_csv}; accuracy {mx.accuracy(preds, test_ds.labels):.4f}")
    return 0


def cmd_bounds(args) -> int:
    args.out = args.out or "run-artifacts"
    paths = hn.Paths(args.out)
    test_ds, params, circuit, partition = _load_models(paths)
    benign_mats = rec.forward_batch(params, test_ds.x)
    cache = it.CircuitCache(circuit)
    all_records = []
    for name in sorted(os.listdir(args.out)):
        if not (name.startswith("adv_") and name.endswith(".bin")):
            continue
        tag = name[len("adv_") : -len(".bin")]
        adv_x = atk.load_adv_vectors(os.path.join(args.out, name))
        adv_mats = rec.forward_batch(params, adv_x)
        records = mx.bound_records(benign_mats, adv_mats, circuit, partition, cache)
        mx.write_bound_records(paths.records(tag), records)
        all_records.extend(records)
    if not all_records:
        raise MissingArtifacts("no adv_*.bin artifacts found; run attack first")
    summary = mx.bound_summary(all_records)
    with open(paths.bounds_summary, "w") as fh:
        fh.write(summary + "\n")
    print(summary)
    failed = (
        mx.chain_violations(all_records)
        + mx.ratio_violations(all_records)
        + mx.direct_comparison_check(all_records)["violations"]
    )
    return 1 if failed else 0


def cmd_report(args) -> int:
    args.out = args.out or "run-artifacts"
    written = write_report(args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = hn.run(cfg)
    write_report(cfg.out_dir)
    npc_rows = [r for r in result.rows if r["mode"] == hn.MODE_NPC]
    if npc_rows:
        top = max(npc_rows, key=lambda r: float(r["bound"]))
        print(f"benign accuracy (npc): {top['benign_acc']:.4f}")
    violations = result.bound_violations
    print(f"bound violations: {violations}")
    print(f"artifacts in {cfg.out_dir}")
    return 1 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npcircuit",
        description="Probabilistic-circuit classifiers, attacks, and bound verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--out", default=None, help="artifact directory")
        if config:
            p.add_argument("--config", default=None, help="JSON experiment config")
            p.add_argument("--preset", default="mnist-add3-like")
            p.add_argument("--seed", type=int, default=None, help="master seed")
            p.add_argument("--n-train", type=int, default=6000)
            p.add_argument("--n-test", type=int, default=2000)

    common(sub.add_parser("gen-data", help="generate train/test datasets"), config=True)
    common(sub.add_parser("train", help="train the attribute recognizer"))
    common(sub.add_parser("learn-circuit", help="learn and fit the circuit"))
    p = sub.add_parser("partition", help="build the high-probability partition")
    common(p)
    p.add_argument("--gamma", type=float, default=None)
    p = sub.add_parser("attack", help="craft PGD examples for the test set")
    common(p)
    p.add_argument("--norm", choices=[atk.NORM_LINF, atk.NORM_L2], default=atk.NORM_LINF)
    p.add_argument("--bound", type=float, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--attacked", default="1", help="comma-separated 1-based attribute ids")
    p = sub.add_parser("eval", help="run inference and write the scores CSV")
    common(p)
    p.add_argument("--mode", choices=[hn.MODE_NPC, hn.MODE_RNPC, hn.MODE_CBM], required=True)
    p.add_argument("--adv", default=None, help="attack tag to evaluate instead of benign inputs")
    common(sub.add_parser("bounds", help="verify the bound inequalities on saved attacks"))
    common(sub.add_parser("report", help="render report.md and the figures"))
    common(sub.add_parser("run", help="full pipeline plus report"), config=True)
    return parser


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "learn-circuit": cmd_learn_circuit,
    "partition": cmd_partition,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "bounds": cmd_bounds,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return HANDLERS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
