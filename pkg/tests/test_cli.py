"""CLI tests: staged subcommands compose into the same artifacts, and exit
codes reflect the bound assertions."""

import json
import os

import pytest

from npcircuit.cli import main


@pytest.mark.slow
class TestStagedPipeline:
    def test_stage_by_stage(self, tmp_path, capsys):
        out = str(tmp_path / "staged")
        base = ["--out", out]
        assert main(["gen-data", *base, "--preset", "mnist-add3-like", "--seed", "5",
                     "--n-train", "1200", "--n-test", "120"]) == 0
        assert main(["train", *base]) == 0
        assert main(["learn-circuit", *base]) == 0
        assert main(["partition", *base]) == 0
        assert main(["attack", *base, "--bound", "0.11", "--attacked", "1", "--steps", "15"]) == 0
        assert main(["eval", *base, "--mode", "npc"]) == 0
        assert main(["eval", *base, "--mode", "rnpc", "--adv", "linf_0.11_1"]) == 0
        assert main(["bounds", *base]) == 0
        for name in (
            "data_train.dset",
            "recognizer.recog",
            "circuit.pc",
            "partition.part",
            "adv_linf_0.11_1.bin",
            "eval_npc_benign.csv",
            "eval_rnpc_linf_0.11_1.csv",
            "bounds_summary.txt",
        ):
            assert os.path.exists(os.path.join(out, name)), name

    def test_run_exit_code_and_config_file(self, tmp_path):
        out = str(tmp_path / "cfg-run")
        cfg = {
            "preset": "mnist-add3-like",
            "out_dir": out,
            "master_seed": 9,
            "n_train": 1200,
            "n_test": 100,
            "epochs": 10,
            "cccp_iters": 5,
            "attack_bounds": [0.0, 0.11],
            "attacked_sets": [[1]],
            "attack_steps": 10,
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["run", "--config", str(cfg_path)]) == 0
        assert os.path.exists(os.path.join(out, "results.csv"))
        assert os.path.exists(os.path.join(out, "report.md"))
        assert os.path.exists(os.path.join(out, "curves_linf.svg"))


class TestErrors:
    def test_missing_artifacts(self, tmp_path):
        from npcircuit.errors import MissingArtifacts

        with pytest.raises(MissingArtifacts):
            main(["train", "--out", str(tmp_path / "empty")])

    def test_unknown_preset(self, tmp_path):
        with pytest.raises(ValueError):
            main(["gen-data", "--out", str(tmp_path / "x"), "--preset", "nope"])
