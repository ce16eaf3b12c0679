"""CLI: exit codes, determinism, config parsing, end-to-end run/audit."""

import json

import pytest

from topoattn.cli import ExperimentConfig, main


def run_cli(*args):
    return main(list(args))


class TestGenerate:
    def test_manifest_shape(self, tmp_path, capsys):
        assert run_cli("generate", "stress", "--seed", "1", "--out", str(tmp_path)) == 0
        manifest = json.loads((tmp_path / "stress_manifest.json").read_text())
        assert manifest["shape"] == [300, 32, 2]
        assert manifest["seed"] == 1

    def test_repeat_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("generate", "shell", "--seed", "2", "--out", str(a))
        run_cli("generate", "shell", "--seed", "2", "--out", str(b))
        for name in ("shell_windows.csv", "shell_targets.csv", "shell_manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_exported_values_are_plain_floats(self, tmp_path):
        run_cli("generate", "cyclic", "--seed", "1", "--out", str(tmp_path))
        body = (tmp_path / "cyclic_windows.csv").read_text()
        assert "np.float" not in body
        first_value = body.splitlines()[1].split(",")[2]
        float(first_value)  # parses as a number

    def test_unknown_dataset_exit_2(self, tmp_path, capsys):
        assert run_cli("generate", "nope", "--out", str(tmp_path)) == 2
        err = capsys.readouterr().err
        assert "stress" in err and "cyclic" in err and "shell" in err


class TestRun:
    def test_classical_only_run(self, tmp_path, capsys):
        out = tmp_path / "runs"
        code = run_cli(
            "run", "--datasets", "stress", "--modes", "classical",
            "--seeds", "1", "--offsets", "0.0", "--out", str(out),
        )
        assert code == 0
        lines = (out / "results.csv").read_text().splitlines()
        assert len(lines) == 2
        # classical-only: ledger carries scalers but no topology calibrations
        ledger = json.loads(next((out / "ledgers").glob("*.json")).read_text())
        assert "scaler_mean" in ledger and "aet_directions" not in ledger

    def test_config_file_and_resume(self, tmp_path, capsys):
        out = tmp_path / "campaign"
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(
            "# comment line\n"
            "datasets = stress\n"
            "modes = classical, zeng_local_h0\n"
            "seeds = 1\n"
            "offsets = 0.0\n"
            f"out = {out}\n"
        )
        assert run_cli("run", "--config", str(cfg)) == 0
        first = (out / "results.csv").read_text()
        assert run_cli("run", "--config", str(cfg)) == 0
        assert "resuming" in capsys.readouterr().out
        assert (out / "results.csv").read_text() == first

    def test_unknown_mode_exit_2(self, tmp_path, capsys):
        assert run_cli("run", "--modes", "bogus", "--out", str(tmp_path)) == 2

    def test_real_dataset_without_csv_fails_actionably(self, tmp_path, capsys):
        code = run_cli("run", "--datasets", "co2", "--out", str(tmp_path))
        assert code == 1
        assert "timestamp,value" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("nonsense = 1\n")
        assert run_cli("run", "--config", str(cfg)) == 1


class TestAudit:
    def test_missing_results_exit_2(self, tmp_path, capsys):
        assert run_cli("audit", "--results", str(tmp_path)) == 2

    def test_audit_after_run(self, tmp_path, capsys):
        out = tmp_path / "runs"
        assert run_cli(
            "run", "--datasets", "stress", "--modes", "classical,static_h0",
            "--seeds", "1,2", "--offsets", "0.0", "--out", str(out),
        ) == 0
        assert run_cli("audit", "--results", str(out)) == 0
        summary = (out / "audit_summary.csv").read_text().splitlines()
        assert summary[0].startswith("architecture,units,improved")
        fields = summary[1].split(",")
        assert int(fields[1]) == 2  # 1 dataset x 2 seeds x 1 offset
        assert (out / "audit_by_dataset.csv").exists()
        assert (out / "audit_bars.svg").exists()
        assert (out / "paired_units.json").exists()


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.datasets == ["stress", "cyclic", "shell"]
        assert cfg.seeds == [1, 2, 3]
        assert cfg.offsets == [-0.05, 0.0, 0.05]

    def test_file_parsing(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "datasets = cyclic, shell\nseeds = 4,5\noffsets = 0.0\n"
            "dataset_seed = 11\nworkers = 2\nco2_csv = /tmp/x.csv\n"
        )
        cfg = ExperimentConfig.from_file(path)
        assert cfg.datasets == ["cyclic", "shell"]
        assert cfg.seeds == [4, 5]
        assert cfg.dataset_seed == 11
        assert cfg.workers == 2
        assert cfg.co2_csv == "/tmp/x.csv"

    def test_unknown_key_raises(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("mystery = 1\n")
        with pytest.raises(ValueError, match="mystery"):
            ExperimentConfig.from_file(path)


def test_help_exits_zero(capsys):
    assert run_cli("--help") == 0
    assert "generate" in capsys.readouterr().out
