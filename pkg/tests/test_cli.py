import csv
import json

import numpy as np
import pytest

from milgraph.cli import main
from milgraph.data import SyntheticSpec, generate_synthetic, write_bag_csv
from milgraph.model import load_checkpoint


@pytest.fixture
def synth_csv(tmp_path):
    path = tmp_path / "synth.csv"
    write_bag_csv(path, generate_synthetic(SyntheticSpec(num_bags=24, seed=4)))
    return path


@pytest.fixture
def gridded_csv(tmp_path):
    bags = generate_synthetic(SyntheticSpec(num_bags=8, seed=4,
                                            bag_size_range=(4, 9)))
    from milgraph.bags import Bag, Instance
    gridded = []
    for b in bags:
        cells = [(k // 3, k % 3) for k in range(b.size)]
        gridded.append(Bag(id=b.id, label=b.label, instances=tuple(
            Instance(features=i.features, grid_pos=c)
            for i, c in zip(b.instances, cells))))
    path = tmp_path / "gridded.csv"
    write_bag_csv(path, gridded)
    return path


FAST = ["--max-epochs", "3", "--conv-dims", "8,4", "--attention-dim", "4",
        "--seed", "7"]


class TestCrossval:
    def test_writes_reports(self, synth_csv, tmp_path):
        out = tmp_path / "run"
        code = main(["crossval", "--dataset", str(synth_csv),
                     "--folds", "3", "--repeats", "1", "--out", str(out)] + FAST)
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["folds"]) == 3
        assert "accuracy" in report["aggregate"]["per_fold"]
        assert report["config"]["train"]["seed"] == 7
        assert (out / "report.txt").exists()

    def test_determinism_byte_identical(self, synth_csv, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = main(["crossval", "--dataset", str(synth_csv),
                         "--folds", "3", "--repeats", "1",
                         "--out", str(out)] + FAST)
            assert code == 0
            outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1]

    def test_too_many_folds_exit_2(self, synth_csv, tmp_path):
        code = main(["crossval", "--dataset", str(synth_csv),
                     "--folds", "100", "--repeats", "1",
                     "--out", str(tmp_path)] + FAST)
        assert code == 2

    def test_missing_dataset_exit_2(self, tmp_path):
        code = main(["crossval", "--dataset", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path)])
        assert code == 2

    def test_spatial_mode_requires_grid(self, synth_csv, tmp_path):
        code = main(["crossval", "--dataset", str(synth_csv),
                     "--graph-mode", "spatial", "--folds", "3",
                     "--repeats", "1", "--out", str(tmp_path)] + FAST)
        assert code == 2

    def test_config_file_with_flag_override(self, synth_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "dataset": str(synth_csv),
            "model": {"conv_dims": [8, 4], "attention_dim": 4},
            "train": {"max_epochs": 2, "folds": 3, "repeats": 1, "seed": 1},
        }))
        out = tmp_path / "run"
        code = main(["crossval", "--config", str(cfg), "--seed", "9",
                     "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["train"]["seed"] == 9  # flag wins


class TestTrainEvaluate:
    def test_train_then_evaluate(self, synth_csv, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--dataset", str(synth_csv),
                     "--out", str(out)] + FAST)
        assert code == 0
        ckpt = out / "checkpoint.bin"
        assert ckpt.exists()
        assert (out / "history.json").exists()

        eval_out = tmp_path / "eval"
        code = main(["evaluate", "--checkpoint", str(ckpt),
                     "--dataset", str(synth_csv), "--out", str(eval_out)])
        assert code == 0
        result = json.loads((eval_out / "metrics.json").read_text())
        assert 0.0 <= result["metrics"]["accuracy"] <= 1.0

    def test_train_acc_at_least_disjoint_test_acc(self, tmp_path):
        train_csv = tmp_path / "train.csv"
        test_csv = tmp_path / "test.csv"
        write_bag_csv(train_csv,
                      generate_synthetic(SyntheticSpec(num_bags=60, seed=21)))
        write_bag_csv(test_csv,
                      generate_synthetic(SyntheticSpec(num_bags=40, seed=22)))
        out = tmp_path / "run"
        assert main(["train", "--dataset", str(train_csv), "--out", str(out),
                     "--max-epochs", "40", "--conv-dims", "8,4",
                     "--attention-dim", "4", "--seed", "7"]) == 0
        accs = {}
        for name, ds in [("train", train_csv), ("test", test_csv)]:
            eval_out = tmp_path / f"eval_{name}"
            assert main(["evaluate", "--checkpoint", str(out / "checkpoint.bin"),
                         "--dataset", str(ds), "--out", str(eval_out)]) == 0
            accs[name] = json.loads(
                (eval_out / "metrics.json").read_text())["metrics"]["accuracy"]
        assert accs["train"] >= accs["test"] - 0.05
        assert accs["test"] >= 0.8

    def test_evaluate_dim_mismatch_exit_2(self, synth_csv, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--dataset", str(synth_csv),
                     "--out", str(out)] + FAST) == 0
        other = tmp_path / "other.csv"
        write_bag_csv(other, generate_synthetic(
            SyntheticSpec(num_bags=6, seed=1, feature_dim=9)))
        code = main(["evaluate", "--checkpoint", str(out / "checkpoint.bin"),
                     "--dataset", str(other), "--out", str(tmp_path / "e")])
        assert code == 2


class TestExportAttention:
    def test_alpha_sums_to_one_per_bag(self, synth_csv, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--dataset", str(synth_csv),
                     "--out", str(out)] + FAST) == 0
        att = tmp_path / "attention.csv"
        assert main(["export-attention", "--checkpoint",
                     str(out / "checkpoint.bin"), "--dataset", str(synth_csv),
                     "--out", str(att)]) == 0
        sums = {}
        with att.open() as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                sums.setdefault(row["bag_id"], 0.0)
                sums[row["bag_id"]] += float(row["alpha"])
                assert row["row"] == "" and row["col"] == ""
        assert len(sums) == 24
        assert all(abs(s - 1.0) <= 1e-9 for s in sums.values())

    def test_gridded_export_matches_forward_alpha(self, gridded_csv, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--dataset", str(gridded_csv),
                     "--graph-mode", "spatial", "--out", str(out),
                     "--max-epochs", "2", "--conv-dims", "8,4",
                     "--attention-dim", "4", "--seed", "7",
                     "--val-fraction", "0.3"]) == 0
        att = tmp_path / "attention.csv"
        assert main(["export-attention", "--checkpoint",
                     str(out / "checkpoint.bin"), "--dataset", str(gridded_csv),
                     "--out", str(att)]) == 0

        # recompute alpha in process and compare to the heatmap rows
        from milgraph.bags import GraphConfig, GraphMode
        from milgraph.data import apply_standardizer, load_gridded_csv
        from milgraph.model import forward
        cfg, params, std, meta = load_checkpoint(out / "checkpoint.bin")
        bags = load_gridded_csv(gridded_csv)
        if std is not None:
            bags = apply_standardizer(bags, *std)
        gcfg = GraphConfig(GraphMode(meta["graph"]["mode"]),
                           meta["graph"]["threshold"])
        expected = {}
        for bag in bags:
            trace = forward(bag, gcfg.build(bag), params, cfg)
            for k, inst in enumerate(bag.instances):
                expected[(bag.id, inst.grid_pos)] = trace.alpha[k]
        with att.open() as fh:
            for row in csv.DictReader(fh):
                key = (row["bag_id"], (int(row["row"]), int(row["col"])))
                assert float(row["alpha"]) == pytest.approx(expected[key],
                                                            abs=1e-12)


class TestSynth:
    def test_deterministic_files(self, tmp_path):
        paths = []
        for name in ("s1.csv", "s2.csv"):
            out = tmp_path / name
            assert main(["synth", "--num-bags", "12", "--seed", "5",
                         "--out", str(out)]) == 0
            paths.append(out.read_bytes())
        assert paths[0] == paths[1]

    def test_single_instance_bag_alpha_is_one(self, tmp_path):
        from milgraph.bags import Bag, Instance
        rng = np.random.default_rng(0)
        bags = [Bag(id=f"b{i}", label=i % 2, instances=(
            Instance(features=rng.normal(size=4)),)) for i in range(8)]
        ds = tmp_path / "single.csv"
        write_bag_csv(ds, bags)
        out = tmp_path / "run"
        assert main(["train", "--dataset", str(ds), "--out", str(out),
                     "--max-epochs", "2", "--conv-dims", "4,3",
                     "--attention-dim", "3", "--seed", "1",
                     "--val-fraction", "0.3"]) == 0
        att = tmp_path / "att.csv"
        assert main(["export-attention", "--checkpoint",
                     str(out / "checkpoint.bin"), "--dataset", str(ds),
                     "--out", str(att)]) == 0
        with att.open() as fh:
            for row in csv.DictReader(fh):
                assert float(row["alpha"]) == 1.0

    def test_invalid_spec_exit_2(self, tmp_path):
        assert main(["synth", "--positive-fraction", "0",
                     "--out", str(tmp_path / "x.csv")]) == 2
