import json
import math
from pathlib import Path

import numpy as np
import pytest

from ensdiv import harness, metrics, nn, tensorio
from ensdiv.cli import EXIT_CODES, main
from ensdiv.consensus import combine
from ensdiv.data import gen_shapes
from ensdiv.exceptions import ConfigError
from ensdiv.harness import ExperimentConfig

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"


def tiny_config(out_dir, **overrides):
    cfg = ExperimentConfig.load(TINY)
    cfg.output_dir = str(out_dir)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("tiny"))
    harness.run_pipeline(cfg)
    return cfg


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg.save(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"seed": 1, "learning_rate": 0.1})

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "c.json")


class TestEnumerate:
    def test_counts_match_binomial(self):
        for n in range(0, 21):
            for k in range(0, min(n, 5) + 1):
                assert len(harness.enumerate_ensembles(n, k)) == math.comb(n, k)

    def test_reference_counts(self):
        assert len(harness.enumerate_ensembles(14, 3)) == 364
        assert len(harness.enumerate_ensembles(11, 3)) == 165

    def test_lexicographic_and_unique(self):
        combos = harness.enumerate_ensembles(5, 3)
        assert combos == sorted(set(combos))
        assert combos[0] == (0, 1, 2)

    def test_k_greater_than_n(self):
        with pytest.raises(ValueError):
            harness.enumerate_ensembles(2, 3)


@pytest.fixture(scope="module")
def small_pool():
    ds = gen_shapes(60, 4, 12, seed=0)
    models = [nn.build(nn.ModelSpec("mlp", (3, 12, 12), 4, hidden=(8,), seed=s)) for s in range(3)]
    return models, {"clean": ds}


class TestEvaluatePool:
    def test_single_member_has_no_improvement(self, small_pool):
        models, sets = small_pool
        rows, _ = harness.evaluate_pool(models, sets, ["average", "vote"], 1)
        assert len(rows) == 6
        for r in rows:
            assert r["improvement"] == 0.0
            assert r["disagreement"] is None and r["attribution_diversity"] is None

    def test_duplicated_member_has_zero_diversity(self, small_pool):
        models, sets = small_pool
        rows, _ = harness.evaluate_pool([models[0], models[0].copy()], sets, ["average"], 2)
        assert rows[0]["disagreement"] == 0.0
        assert rows[0]["attribution_diversity"] == 0.0
        assert rows[0]["improvement"] == 0.0

    def test_improvement_definition(self, small_pool):
        models, sets = small_pool
        rows, logs = harness.evaluate_pool(models, sets, ["average", "median"], 2, attribution_samples=10)
        assert len(rows) == 3 * 2
        labels = logs["clean"]["labels"]
        for r in rows:
            idx = [int(i) for i in r["ensemble"].split("-")]
            sub = logs["clean"]["logits"][idx]
            acc = np.mean(combine(sub, r["consensus"])[1] == labels)
            top = max(np.mean(sub.argmax(-1) == labels, axis=1))
            assert r["acc_ensemble"] == pytest.approx(acc, abs=1e-12)
            assert r["improvement"] == pytest.approx(acc - top, abs=1e-12)


class TestPipeline:
    def test_outputs_exist(self, tiny_run):
        out = tiny_run.out
        for rel in ("config.json", "rows.csv", "trends.csv", "train_log.csv", "train_summary.json",
                    "checkpoints/member0.final.ckpt", "checkpoints/member3.best.ckpt", "eval/logits_clean.bin",
                    "eval/predictions_plasma.csv", "trend_disagreement_clean_average.dat"):
            assert (out / rel).exists(), rel

    def test_row_columns_and_count(self, tiny_run):
        rows = harness.read_csv(tiny_run.out / "rows.csv")
        assert tuple(rows[0]) == harness.ROW_COLUMNS
        # C(4, 3) ensembles x 6 datasets x 2 consensus rules
        assert len(rows) == 4 * 6 * 2
        assert [r["dataset"] for r in rows[::8]] == list(harness.DATASET_ORDER)

    def test_improvement_recomputed_from_logit_dumps(self, tiny_run):
        rows = harness.read_csv(tiny_run.out / "rows.csv")
        for name in harness.DATASET_ORDER:
            t, _ = tensorio.read_tensors(tiny_run.out / "eval" / f"logits_{name}.bin", kind="logits")
            logits, labels = t["logits"], t["labels"].astype(int)
            for r in (r for r in rows if r["dataset"] == name):
                idx = [int(i) for i in r["ensemble"].split("-")]
                acc = np.mean(combine(logits[idx], r["consensus"], tiny_run.seed)[1] == labels)
                top = max(np.mean(logits[idx].argmax(-1) == labels, axis=1))
                assert abs(float(r["improvement"]) - (acc - top)) <= 1e-12
                assert float(r["improvement"]) == pytest.approx(float(r["acc_ensemble"]) - float(r["acc_top"]), abs=1e-12)

    def test_trends_match_metrics(self, tiny_run):
        rows = harness.read_csv(tiny_run.out / "rows.csv")
        trends = harness.read_csv(tiny_run.out / "trends.csv")
        for t in trends:
            group = [r for r in rows if r["dataset"] == t["dataset"] and r["consensus"] == t["consensus"]]
            x = np.array([float(r[t["metric"]]) for r in group])
            y = np.array([float(r["improvement"]) for r in group])
            if t["pearson_r"] == "":
                continue
            ref = metrics.pearson_and_trend(x, y)
            assert float(t["pearson_r"]) == pytest.approx(ref.r, abs=1e-12)
            assert float(t["slope"]) == pytest.approx(ref.slope, abs=1e-12)

    def test_rerun_is_byte_identical(self, tiny_run, tmp_path):
        twin = tiny_config(tmp_path)
        harness.run_pipeline(twin)
        files = [p.relative_to(tiny_run.out) for p in tiny_run.out.rglob("*") if p.is_file()]
        assert len(files) > 20
        for rel in files:
            if rel.name == "config.json":
                continue
            assert (tiny_run.out / rel).read_bytes() == (twin.out / rel).read_bytes(), rel

    def test_offline_report(self, tiny_run):
        pairs, split = harness.offline_prediction_metrics(tiny_run.out / "eval" / "predictions_clean.csv")
        assert len(pairs) == math.comb(4, 2)
        assert set(split) >= {"H_corr", "H_inco"}


class TestReport:
    def test_planted_trend(self, tmp_path):
        rows = [
            {"ensemble": str(i), "dataset": "clean", "consensus": "average", "improvement": 0.5 * x + 0.1,
             "attribution_diversity": x, "disagreement": x, "acc_member_mean": -x, "acc_ensemble": 0.9, "n_params": 10}
            for i, x in enumerate([0.0, 0.1, 0.4, 0.7])
        ]
        trends = {t["metric"]: t for t in harness.report(rows, tmp_path)}
        assert trends["disagreement"]["pearson_r"] == pytest.approx(1.0, abs=1e-12)
        assert trends["disagreement"]["slope"] == pytest.approx(0.5, abs=1e-12)
        assert trends["acc_member_mean"]["pearson_r"] == pytest.approx(-1.0, abs=1e-12)

    def test_too_few_rows(self, tmp_path):
        with pytest.raises(ValueError):
            harness.report([{}, {}], tmp_path)

    def test_golden_csv(self, tmp_path):
        rows = [{"a": 1, "b": 0.1, "c": None}, {"a": np.int64(2), "b": float("nan"), "c": "x,y"}]
        harness.write_csv(tmp_path / "g.csv", ("a", "b", "c"), rows)
        assert (tmp_path / "g.csv").read_bytes() == b'a,b,c\n1,0.10000000000000001,\n2,,"x,y"\n'


class TestAttribCompare:
    def test_identical_models(self, small_pool):
        models, sets = small_pool
        m = models[0]
        rows, corr, _ = harness.attrib_compare([m, m.copy(), m.copy()], sets["clean"].images[:5], ("saliency", "ig-2"))
        assert all(r["saliency"] == 0.0 and r["ig-2_norm"] == 0.0 for r in rows)

    def test_single_method(self, small_pool):
        models, sets = small_pool
        _, corr, mean_corr = harness.attrib_compare(models, sets["clean"].images[:5], ("saliency",))
        np.testing.assert_array_equal(corr, [[1.0]])
        assert mean_corr == 1.0

    def test_unknown_method(self, small_pool):
        models, sets = small_pool
        with pytest.raises(ConfigError):
            harness.attrib_compare(models, sets["clean"].images[:2], ("smoothgrad",))


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


class TestCLI:
    def test_enumerate(self, capsys):
        code, out, _ = run_cli(capsys, "enumerate", 14, 3)
        assert code == 0 and out["count"] == 364
        code, out, _ = run_cli(capsys, "enumerate", 4, 2, "--list")
        assert out["ensembles"][0] == [0, 1]

    def test_enumerate_error_category(self, capsys):
        code, _, err = run_cli(capsys, "enumerate", 2, 3)
        assert code == EXIT_CODES["config"] and err["error"] == "config"

    def test_usage_error(self, capsys):
        assert main(["frobnicate"]) == EXIT_CODES["usage"]
        capsys.readouterr()

    def test_lm_sim(self, capsys):
        code, out, _ = run_cli(capsys, "lm-sim", "--reference", "anticorrelated", "--exact", "--mc", 20000, "--seed", 1)
        assert code == 0
        assert out["exact"]["p_both"] == pytest.approx(0.09, abs=1e-15)
        assert abs(out["mc"]["estimate"] - 0.09) <= 4 * out["mc"]["stderr"]

    def test_lm_sim_bad_world(self, capsys, tmp_path):
        (tmp_path / "w.json").write_text('{"inputs": ["x"]}')
        code, _, err = run_cli(capsys, "lm-sim", "--world", tmp_path / "w.json")
        assert code == EXIT_CODES["format"] and err["error"] == "format"

    def test_missing_checkpoint(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "attrib-compare", "--config", TINY, "--out", tmp_path)
        assert code == EXIT_CODES["checkpoint"] and err["error"] == "checkpoint"

    def test_bad_corrupt_spec(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "gen-data", "--config", TINY, "--out", tmp_path, "--corrupt", "kind=fog")
        assert code == EXIT_CODES["config"] and err["error"] == "config"

    def test_report_without_rows(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "report", "--rows", tmp_path / "rows.csv")
        assert code == EXIT_CODES["io"] and err["error"] == "io"

    def test_subcommands_on_tiny_run(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "gen-data", "--config", TINY, "--out", tmp_path, "--seed", 5,
                               "--corrupt", "kind=lines,strength=1.6,seed=2")
        assert code == 0 and set(out["datasets"]) == {"train", "val", "clean", "v2", "lines"}
        assert json.loads((tmp_path / "config.json").read_text())["seed"] == 5
        code, out, _ = run_cli(capsys, "train", "--config", tmp_path / "config.json")
        assert code == 0 and out["members"] == 4
        code, out, _ = run_cli(capsys, "eval", "--config", tmp_path / "config.json", "--checkpoint", "best", "--ensemble-size", 2)
        assert code == 0 and out["rows"] == math.comb(4, 2) * 3 * 2
        code, out, _ = run_cli(capsys, "report", "--config", tmp_path / "config.json")
        assert code == 0 and (tmp_path / "trends.csv").exists()
        code, out, _ = run_cli(capsys, "report", "--predictions", tmp_path / "eval" / "predictions_clean.csv")
        assert code == 0 and out["pairs"] == 6
        code, out, _ = run_cli(capsys, "attrib-compare", "--config", tmp_path / "config.json", "--samples", 10,
                               "--methods", "saliency,ig-2")
        assert code == 0 and out["pairs"] == 6
        assert (tmp_path / "attrib_correlation.csv").exists()
