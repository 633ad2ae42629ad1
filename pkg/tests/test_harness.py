"""Config loading/overrides, CLI subcommands and exit codes, verification families."""

import json
import subprocess
import sys

import numpy as np
import pytest

from spcl.ablation import AblationRow, ablation_checks, format_ablation_table
from spcl.config import (
    ExperimentConfig,
    OUTPUT_ROOT_ENV,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
)
from spcl.errors import InvalidConfig
from spcl.verify import check_closed_form_weights, run_verification

SMALL = {
    "seed": 1,
    "data": {"num_patients": 5, "slices_per_volume": 6, "height": 8, "width": 8, "noise_level": 0.2, "seed": 3},
    "model": {"arch": "conv", "conv_channels": [3, 4], "head_hidden": 8, "embed_dim": 6},
    "pretrain": {"epochs": 2, "batch_originals": 4},
    "semisup": {"epochs": 2, "batch_size": 4, "unlabeled_batch_originals": 4},
    "ablation": {"seeds": [0, 1, 2], "num_labeled": 1},
}


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "spcl", *args], cwd=cwd, capture_output=True, text=True
    )


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        again = config_from_dict(config_to_dict(cfg))
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidConfig):
            config_from_dict({"data": {"num_patients": 4, "bogus": 1}})
        with pytest.raises(InvalidConfig):
            config_from_dict({"nonsense": {}})

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"data": {"noise_level": 0.1}}))
        cfg = load_config(str(path), ["data.noise_level=0.7", "semisup.lambda_sp=0.25"])
        assert cfg.data.noise_level == 0.7
        assert cfg.semisup.lambda_sp == 0.25

    def test_override_parsing(self):
        data = apply_overrides({}, ["a.b=3", "a.c=true", "a.d=hello", "e=[1,2]"])
        assert data == {"a": {"b": 3, "c": True, "d": "hello"}, "e": [1, 2]}

    def test_missing_file(self):
        with pytest.raises(InvalidConfig):
            load_config("/nonexistent/config.json")

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        cfg = ExperimentConfig(output_dir="runs")
        assert str(cfg.output_root()) == str(tmp_path / "runs")

    def test_builders_produce_valid_configs(self):
        cfg = config_from_dict(SMALL)
        assert cfg.model_config().image_shape == (8, 8)
        assert cfg.pretrain_config().epochs == 2
        assert cfg.semisup_config(lambda_sp=0.0).lambda_sp == 0.0
        assert cfg.self_paced_config().lambdas == (1.0, 0.1, 0.1)


class TestVerification:
    def test_all_families_pass(self):
        report = run_verification(fast=True)
        assert report.passed, report.failed_names
        assert len(report.families) >= 6

    def test_corrupted_weight_formula_fails_family(self):
        from spcl.self_paced import optimal_weight

        def corrupted(l, gamma, regularizer):
            return min(1.0, float(optimal_weight(l, gamma, regularizer)) + 0.01)

        family = check_closed_form_weights(corrupted, trials=100)
        assert not family.passed

    def test_report_is_machine_readable(self):
        report = run_verification(fast=True)
        parsed = json.loads(report.to_json())
        assert parsed["passed"] is True
        assert len(parsed["families"]) >= 6


class TestAblationMachinery:
    def test_row_statistics(self):
        row = AblationRow.from_scores("baseline", [0.5, 0.7, 0.6])
        assert row.mean == pytest.approx(0.6)
        assert row.median == pytest.approx(0.6)
        assert row.std == pytest.approx(np.std([0.5, 0.7, 0.6]))

    def test_ordering_checks(self):
        rows = [
            AblationRow.from_scores("baseline", [0.5, 0.5, 0.5]),
            AblationRow.from_scores("sp-con(both)+mean-teacher", [0.7, 0.7, 0.7]),
            AblationRow.from_scores("full-supervision", [0.9, 0.9, 0.9]),
        ]
        assert ablation_checks(rows, baseline_margin=0.05) == []
        bad = [
            AblationRow.from_scores("baseline", [0.5, 0.5, 0.5]),
            AblationRow.from_scores("sp-con(both)+mean-teacher", [0.52, 0.52, 0.52]),
            AblationRow.from_scores("full-supervision", [0.4, 0.4, 0.4]),
        ]
        problems = ablation_checks(bad, baseline_margin=0.05)
        assert len(problems) >= 2

    def test_table_contains_all_variants(self):
        rows = [AblationRow.from_scores(v, [0.1, 0.2, 0.3]) for v in ("baseline", "full-supervision")]
        table = format_ablation_table(rows)
        assert "baseline" in table and "full-supervision" in table


class TestCliProcess:
    @pytest.fixture()
    def workdir(self, tmp_path):
        (tmp_path / "small.json").write_text(json.dumps(SMALL))
        return tmp_path

    def test_full_pipeline(self, workdir):
        r = run_cli(["generate-data", "--config", "small.json", "--out", "ds"], workdir)
        assert r.returncode == 0, r.stderr
        r = run_cli(["pretrain", "--config", "small.json", "--data", "ds", "--name", "pre"], workdir)
        assert r.returncode == 0, r.stderr
        assert (workdir / "runs" / "pre" / "history.csv").exists()
        assert (workdir / "runs" / "pre" / "config.json").exists()
        r = run_cli(
            ["train", "--config", "small.json", "--data", "ds", "--init", "runs/pre/encoder.npz", "--name", "tr"],
            workdir,
        )
        assert r.returncode == 0, r.stderr
        summary = json.loads((workdir / "runs" / "tr" / "summary.json").read_text())
        assert "dice_mean" in summary
        r = run_cli(["eval", "--config", "small.json", "--model", "runs/tr/model.npz", "--data", "ds"], workdir)
        assert r.returncode == 0, r.stderr
        assert "mean" in json.loads(r.stdout)

    def test_pace_report_csv_structure(self, workdir):
        r = run_cli(["pace-report", "--config", "small.json", "--epochs", "4"], workdir)
        assert r.returncode == 0, r.stderr
        lines = (workdir / "runs" / "pace" / "pace.csv").read_text().splitlines()
        assert lines[0] == "epoch,p,regularizer,gamma,mean_w,min_w,max_w"
        assert len(lines) - 1 == 5 * 3 * 2  # epochs 0..4 x three exponents x two regularizers

    def test_config_error_exit_code(self, workdir):
        r = run_cli(["train", "--config", "small.json", "--set", "data.bogus=1"], workdir)
        assert r.returncode == 2

    def test_data_error_exit_code(self, workdir):
        r = run_cli(["pretrain", "--config", "small.json", "--data", "missing_dir"], workdir)
        assert r.returncode == 3

    def test_verify_fast_passes(self, workdir):
        r = run_cli(["verify", "--fast", "--json"], workdir)
        assert r.returncode == 0, r.stderr
        assert json.loads(r.stdout)["passed"] is True

    def test_determinism_of_history(self, workdir):
        run_cli(["generate-data", "--config", "small.json", "--out", "ds"], workdir)
        run_cli(["train", "--config", "small.json", "--data", "ds", "--name", "t1"], workdir)
        run_cli(["train", "--config", "small.json", "--data", "ds", "--name", "t2"], workdir)
        a = (workdir / "runs" / "t1" / "history.csv").read_bytes()
        b = (workdir / "runs" / "t2" / "history.csv").read_bytes()
        assert a == b

    def test_train_summary_carries_version(self, workdir):
        import spcl

        run_cli(["generate-data", "--config", "small.json", "--out", "ds"], workdir)
        run_cli(["train", "--config", "small.json", "--data", "ds", "--name", "t1"], workdir)
        summary = json.loads((workdir / "runs" / "t1" / "summary.json").read_text())
        assert summary["version"] == spcl.__version__

    def test_run_reproducible_from_persisted_config(self, workdir):
        """The effective config a run writes is enough to reproduce it."""
        run_cli(["generate-data", "--config", "small.json", "--out", "ds"], workdir)
        run_cli(["train", "--config", "small.json", "--data", "ds", "--name", "t1"], workdir)
        r = run_cli(["train", "--config", "runs/t1/config.json", "--data", "ds", "--name", "t2"], workdir)
        assert r.returncode == 0, r.stderr
        a = (workdir / "runs" / "t1" / "history.csv").read_bytes()
        b = (workdir / "runs" / "t2" / "history.csv").read_bytes()
        assert a == b


class TestAblationRuns:
    def test_variant_ladder_deterministic_tables(self, tmp_path):
        """Two invocations with identical seeds produce identical tables."""
        from spcl.ablation import run_ablation, write_ablation_csv
        from spcl.synth_data import generate_dataset

        cfg = config_from_dict(SMALL)
        dataset = generate_dataset(**cfg.data_kwargs())
        variants = ("baseline", "con(meta)", "sp-con(both)+mean-teacher", "full-supervision")
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        write_ablation_csv(run_ablation(cfg, dataset=dataset, variants=variants), pa)
        write_ablation_csv(run_ablation(cfg, dataset=dataset, variants=variants), pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_unknown_variant_rejected(self):
        from spcl.ablation import run_variant
        from spcl.synth_data import generate_dataset

        cfg = config_from_dict(SMALL)
        dataset = generate_dataset(**cfg.data_kwargs())
        with pytest.raises(InvalidConfig):
            run_variant("bogus", dataset, cfg, seed=0)
