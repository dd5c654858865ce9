import json

import numpy as np
import pytest

from pointstack import cli
from pointstack.data import save_dataset_dir
from pointstack.experiments import (
    ABLATION_ROWS,
    ExperimentConfig,
    ablation_config,
    build_dataset,
    evaluate,
    parse_config,
    run_ablation,
    run_permutation_test,
    run_training,
)

from conftest import TINY_CONFIG


class TestConfig:
    def test_parse(self):
        exp = parse_config(TINY_CONFIG)
        assert [(s.points, s.channels, s.k) for s in exp.model.backbone.stages] == [(16, 8, 4), (8, 16, 4)]
        assert exp.model.head.hidden == [8] and exp.train.epochs == 2
        assert exp.data.synthetic.classes == ["sphere", "box"] and exp.data.n_points == 32

    def test_dict_round_trip(self):
        exp = parse_config(TINY_CONFIG)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(exp.to_dict()))) == exp

    @pytest.mark.parametrize("text", [
        "[nonsense]\nx = 1\n",
        "[train]\nlearning_rate = 0.1\n",
        "[backbone]\nstages = 16by8\n",
        "[train]\nepochs = many\n",
        "[train]\ntranslate = maybe\n",
    ])
    def test_rejects_bad_config(self, text):
        with pytest.raises(ValueError):
            parse_config(text)

    def test_segmentation_head_defaults(self):
        exp = parse_config("[model]\ntask = segmentation\n")
        assert exp.model.head.hidden == [1024, 512, 256] and exp.model.head.dropout == 0.4

    def test_repo_configs_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        for f in sorted(root.glob("*.ini")):
            parse_config(f.read_text())


class TestRunners:
    def test_training_log_records(self, tmp_path):
        res = run_training(parse_config(TINY_CONFIG), out_dir=tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["kind"] for r in lines] == ["epoch", "epoch", "final"]
        assert lines[-1]["split"] == "test" and lines[-1]["epochs_run"] == 2
        assert lines == res.records

    def test_seed_override(self):
        exp = parse_config(TINY_CONFIG)
        a = run_training(exp, seed=3).records
        b = run_training(exp, seed=3).records
        c = run_training(exp, seed=4).records
        assert a == b and a != c

    def test_evaluate_order_invariant(self):
        exp = parse_config(TINY_CONFIG)
        res = run_training(exp)
        ds = build_dataset(exp.data)
        order = np.random.default_rng(0).permutation(len(ds))
        a, b = evaluate(res.model, ds), evaluate(res.model, ds.subset(order))
        assert a.oa == b.oa and a.macc == pytest.approx(b.macc, abs=1e-15)

    def test_identity_permutation_zero_spread(self):
        exp = parse_config(TINY_CONFIG)
        res = run_training(exp)
        rep = run_permutation_test(res.model, build_dataset(exp.data), 10, np.random.default_rng(0), identity=True)
        assert rep.std == 0.0 and len(rep.oas) == 10
        with pytest.raises(ValueError):
            run_permutation_test(res.model, build_dataset(exp.data), 1, np.random.default_rng(0))

    def test_ablation_rows_and_flags(self):
        assert [r[0] for r in ABLATION_ROWS] == ["baseline", "multires_max", "multires_single_lp", "pointstack",
                                                 "multires_multi_lp_only"]
        exp = parse_config(TINY_CONFIG)
        cfg = ablation_config(exp, False, False, False).model.backbone
        assert not (cfg.multi_resolution_features or cfg.single_resolution_lp or cfg.multi_resolution_lp)
        with pytest.raises(ValueError):
            run_ablation(build_dataset(exp.data), exp, [0])

    def test_ablation_records(self):
        exp = parse_config(TINY_CONFIG.replace("epochs = 2", "epochs = 1"))
        out = []
        rows = run_ablation(build_dataset(exp.data), exp, [0, 1], emit=out.append)
        summary = [r for r in out if r["kind"] == "ablation_row"]
        assert len(summary) == 5 and len(out) == 15
        for r in summary:
            assert r["oa_mean"] == pytest.approx(np.mean(r["oas"])) and 0 <= r["oa_std"]
        assert rows is not None


class TestCLI:
    def run(self, capsys, *argv):
        code = cli.main(list(argv))
        out, err = capsys.readouterr()
        return code, [json.loads(l) for l in out.splitlines()], [json.loads(l) for l in err.splitlines()]

    def test_train_eval_permtest(self, capsys, tmp_path, tiny_config_path):
        code, out, _ = self.run(capsys, "train", "--config", str(tiny_config_path), "--out", str(tmp_path / "r"))
        assert code == 0 and out[-1]["kind"] == "final"
        ckpt = str(tmp_path / "r" / "model.ckpt")
        code, out, _ = self.run(capsys, "eval", "--checkpoint", ckpt)
        assert code == 0 and out[0]["kind"] == "eval" and out[0]["n_samples"] == 4
        code, out, _ = self.run(capsys, "permtest", "--checkpoint", ckpt, "--n", "3")
        assert code == 0 and len(out[0]["oas"]) == 3

    def test_eval_on_dataset_dir(self, capsys, tmp_path, tiny_config_path):
        self.run(capsys, "train", "--config", str(tiny_config_path), "--out", str(tmp_path / "r"))
        exp = parse_config(TINY_CONFIG)
        save_dataset_dir(build_dataset(exp.data), tmp_path / "d")
        code, out, _ = self.run(capsys, "eval", "--checkpoint", str(tmp_path / "r" / "model.ckpt"),
                                "--data", str(tmp_path / "d"), "--split", "train")
        assert code == 0 and out[0]["n_samples"] == 6

    def test_usage_error_is_json(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["train"])
        assert e.value.code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["kind"] == "error" and err["error"] == "UsageError"

    def test_runtime_errors_exit_nonzero(self, capsys, tmp_path, tiny_config_path):
        code, _, err = self.run(capsys, "train", "--config", str(tmp_path / "missing.ini"))
        assert code == 1 and err[0]["kind"] == "error"
        code, _, err = self.run(capsys, "eval", "--checkpoint", str(tiny_config_path))
        assert code == 1 and err[0]["error"] == "CheckpointError"
        code, _, err = self.run(capsys, "ablate", "--config", str(tiny_config_path), "--seeds", "1")
        assert code == 1

    def test_gradcheck_pooling(self, capsys):
        code, out, _ = self.run(capsys, "gradcheck", "--module", "pooling")
        assert code == 0
        assert out[-1]["kind"] == "gradcheck_summary" and out[-1]["failed"] == []
        assert all(r["passed"] for r in out[:-1])
