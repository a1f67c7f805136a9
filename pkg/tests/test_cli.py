import csv
import json
import math

import numpy as np
import pytest

from cubature_shaping import cli, trainer
from cubature_shaping.constellations import ConstellationFile, read_constellation, square_qam
from cubature_shaping.errors import NumericalBreakdown
from oracles import awgn_mi_quadrature, qam_points

MINIMAL = """\
name: tiny
seed: 7
channel:
  kind: awgn
  snr_db: 10
train:
  M: 4
  max_iterations: 40
evaluation:
  runs: 2
  symbols_per_run: 2000
"""


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "spec.yaml"
    p.write_text(MINIMAL)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_minimal_writes_three_files(self, spec_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["train", str(spec_file), "--output-dir", str(out)]) == 0
        files = sorted(p.name for p in out.iterdir())
        assert files == ["tiny_snr_db_10_constellation.json", "tiny_snr_db_10_loss.csv", "tiny_snr_db_10_manifest.json"]
        cf = read_constellation(out / files[0])
        assert abs(np.mean(np.abs(cf.points) ** 2) - 1) < 1e-9
        loss = read_csv(out / files[1])
        assert len(loss) == 40 and loss[0]["iteration"] == "1"
        manifest = json.loads((out / files[2]).read_text())
        assert manifest["seed"] == 7
        assert manifest["spec"]["train"]["M"] == 4
        assert manifest["hyperparams"] == {"q": 1e-4, "r": 1e-2}
        assert "numpy" in manifest["versions"]

    def test_rerun_byte_identical(self, spec_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["train", str(spec_file), "--output-dir", str(a)])
        cli.main(["train", str(spec_file), "--output-dir", str(b)])
        for name in ("tiny_snr_db_10_constellation.json", "tiny_snr_db_10_loss.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_manifest_reproduces_weights(self, spec_file, tmp_path):
        from cubature_shaping.schemas import ExperimentSpec

        cli.main(["train", str(spec_file), "--output-dir", str(tmp_path)])
        manifest = json.loads((tmp_path / "tiny_snr_db_10_manifest.json").read_text())
        spec = ExperimentSpec.model_validate(manifest["spec"])
        rep = trainer.train(spec.train_config(manifest["operating_point"]))
        assert rep.final_weights.tolist() == manifest["weights"]

    def test_sweep_three_points(self, spec_file, tmp_path):
        rc = cli.main(["train", str(spec_file), "--snr-db", "6", "10", "14", "--output-dir", str(tmp_path)])
        assert rc == 0
        files = sorted(tmp_path.glob("*_constellation.json"))
        assert len(files) == 3
        points = {read_constellation(f).metadata["operating_point"] for f in files}
        assert points == {6.0, 10.0, 14.0}

    def test_env_var_output_dir(self, spec_file, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "env"))
        assert cli.main(["train", str(spec_file), "--max-iterations", "1"]) == 0
        assert (tmp_path / "env" / "tiny_snr_db_10_manifest.json").exists()

    def test_breakdown_exit_2_keeps_partial(self, spec_file, tmp_path, monkeypatch):
        real = trainer.train

        def flaky(cfg, initial_weights=None):
            if cfg.channel.snr_db > 8:
                raise NumericalBreakdown("forced", 3, cfg.hp)
            return real(cfg, initial_weights)

        monkeypatch.setattr(trainer, "train", flaky)
        rc = cli.main(["train", str(spec_file), "--snr-db", "6", "12", "--output-dir", str(tmp_path)])
        assert rc == 2
        assert (tmp_path / "tiny_snr_db_6_constellation.json").exists()
        assert not (tmp_path / "tiny_snr_db_12_constellation.json").exists()


class TestErrors:
    def test_invalid_field_reports_line(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(MINIMAL.replace("M: 4", "M: 6"))
        assert cli.main(["train", str(p)]) == 1
        err = capsys.readouterr().err
        assert "bad.yaml:7" in err and "train.M" in err

    def test_unknown_key(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(MINIMAL + "bogus: 1\n")
        assert cli.main(["train", str(p)]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_yaml_syntax(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("channel: [unclosed\n")
        assert cli.main(["train", str(p)]) == 1

    def test_missing_spec_is_io_error(self, tmp_path):
        assert cli.main(["train", str(tmp_path / "missing.yaml")]) == 3

    def test_flag_for_wrong_channel(self, spec_file, capsys):
        assert cli.main(["train", str(spec_file), "--launch-dbm", "0"]) == 1

    def test_usage_error_is_config_error(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["train"])
        assert info.value.code == 1

    def test_unwritable_output(self, spec_file, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["export-qam", "4", "--output-dir", str(blocker / "sub")]) == 3


class TestEvaluate:
    def test_qam64_awgn_25db(self, tmp_path):
        rc = cli.main(
            ["evaluate", "--qam", "64", "--snr-db", "25", "--runs", "2", "--symbols", "10000", "--output-dir", str(tmp_path)]
        )
        assert rc == 0
        (row,) = read_csv(tmp_path / "experiment_evaluate.csv")
        assert list(row) == ["label", "operating_point", "receiver", "mi_mean", "mi_max", "mi_p25", "runs", "symbols_per_run", "seed"]
        assert float(row["mi_mean"]) == pytest.approx(awgn_mi_quadrature(qam_points(64), 25.0), abs=0.05)

    def test_same_file_twice_identical_rows(self, tmp_path):
        cli.main(["export-qam", "16", "--output-dir", str(tmp_path)])
        f = str(tmp_path / "qam16.json")
        cli.main(["evaluate", f, f, "--snr-db", "8", "--runs", "2", "--symbols", "1000", "--output-dir", str(tmp_path)])
        rows = read_csv(tmp_path / "experiment_evaluate.csv")
        assert len(rows) == 2 and rows[0] == rows[1]

    def test_full_precision(self, tmp_path):
        cli.main(["evaluate", "--qam", "4", "--snr-db", "3", "--runs", "1", "--symbols", "500", "--output-dir", str(tmp_path)])
        (row,) = read_csv(tmp_path / "experiment_evaluate.csv")
        v = float(row["mi_mean"])
        assert row["mi_mean"] == "%.17g" % v

    def test_bps_qam64_phase_slips(self, tmp_path):
        spec = tmp_path / "bps.yaml"
        spec.write_text("channel:\n  kind: pn_bps\n  snr_db: 15\n  num_test_phases: 36\n  window_size: 64\n")
        rc = cli.main(["evaluate", "--qam", "64", "--spec", str(spec), "--runs", "20", "--symbols", "10000", "--output-dir", str(tmp_path)])
        assert rc == 0
        (row,) = read_csv(tmp_path / "experiment_evaluate.csv")
        assert float(row["mi_max"]) - float(row["mi_p25"]) > 0.5

    def test_power_mismatch_names_file(self, tmp_path, capsys):
        doc = json.loads(ConstellationFile(square_qam(4)).to_text())
        doc["points"][0] = [3.0, 0.0]
        bad = tmp_path / "skewed.json"
        bad.write_text(json.dumps(doc))
        assert cli.main(["evaluate", str(bad), "--output-dir", str(tmp_path)]) == 3
        assert "skewed.json" in capsys.readouterr().err

    def test_nothing_to_evaluate(self, tmp_path):
        assert cli.main(["evaluate", "--output-dir", str(tmp_path)]) == 1


class TestGridSearch:
    def test_two_by_two(self, tmp_path):
        spec = tmp_path / "g.yaml"
        spec.write_text(
            MINIMAL + "grid:\n  q: [0.001, 0.0001]\n  r: [0.1, 0.01]\n  test_symbols: 5000\n"
        )
        assert cli.main(["grid-search", str(spec), "--output-dir", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "tiny_snr_db_10_grid.csv")
        assert len(rows) == 4
        assert list(rows[0]) == ["q", "r", "status", "final_loss_nats", "validation_mi", "test_mi", "iterations", "selected"]
        chosen = [r for r in rows if r["selected"] == "1"]
        assert len(chosen) == 1
        assert float(chosen[0]["test_mi"]) == max(float(r["test_mi"]) for r in rows if r["status"] == "ok")
        manifest = json.loads((tmp_path / "tiny_snr_db_10_manifest.json").read_text())
        assert manifest["grid"]["selected"] == {"q": float(chosen[0]["q"]), "r": float(chosen[0]["r"])}

    def test_same_winner_on_rerun(self, tmp_path):
        spec = tmp_path / "g.yaml"
        spec.write_text(MINIMAL + "grid:\n  q: [0.01, 0.0001]\n  r: [1.0, 0.01]\n  test_symbols: 5000\n")
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["grid-search", str(spec), "--output-dir", str(a)])
        cli.main(["grid-search", str(spec), "--output-dir", str(b)])
        assert (a / "tiny_snr_db_10_grid.csv").read_bytes() == (b / "tiny_snr_db_10_grid.csv").read_bytes()


class TestCompare:
    def test_series_at_every_point(self, tmp_path):
        spec = tmp_path / "c.yaml"
        spec.write_text(MINIMAL + "compare:\n  series: [ae-ckf, ae-bp, qam]\n")
        rc = cli.main(["compare", str(spec), "--snr-db", "6", "10", "--output-dir", str(tmp_path)])
        assert rc == 0
        rows = read_csv(tmp_path / "tiny_compare.csv")
        assert list(rows[0]) == ["series", "operating_point", "receiver", "mi_mean", "mi_max", "mi_p25"]
        seen = {(r["series"], r["operating_point"]) for r in rows}
        assert seen == {(s, p) for s in ("ae-ckf", "ae-bp", "qam") for p in ("6", "10")}

    def test_decoder_receiver_rows_only_for_autoencoders(self, tmp_path):
        spec = tmp_path / "c.yaml"
        spec.write_text(MINIMAL.replace("  runs: 2", "  runs: 1\n  receivers: [gaussian, decoder]") + "compare:\n  series: [ae-ckf, qam]\n")
        assert cli.main(["compare", str(spec), "--output-dir", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "tiny_compare.csv")
        assert {(r["series"], r["receiver"]) for r in rows} == {
            ("ae-ckf", "gaussian"),
            ("ae-ckf", "decoder"),
            ("qam", "gaussian"),
        }

    def test_backprop_on_bps_rejected(self, tmp_path, capsys):
        spec = tmp_path / "c.yaml"
        spec.write_text("channel:\n  kind: pn_bps\ntrain:\n  M: 4\ncompare:\n  series: [ae-ckf, ae-bp]\n")
        assert cli.main(["compare", str(spec), "--output-dir", str(tmp_path)]) == 1
        assert "differentiable" in capsys.readouterr().err
        assert not list(tmp_path.glob("*.csv"))

    def test_backprop_train_on_bps_rejected(self, tmp_path):
        spec = tmp_path / "t.yaml"
        spec.write_text("channel:\n  kind: pn_bps\ntrain:\n  M: 4\n  optimizer: backprop\n")
        assert cli.main(["train", str(spec), "--output-dir", str(tmp_path)]) == 1


class TestExportQam:
    def test_writes_unit_power_file(self, tmp_path):
        assert cli.main(["export-qam", "64", "--output-dir", str(tmp_path)]) == 0
        cf = read_constellation(tmp_path / "qam64.json")
        assert cf.M == 64 and cf.label == "QAM-64"

    def test_rejects_non_square(self, tmp_path):
        assert cli.main(["export-qam", "8", "--output-dir", str(tmp_path)]) == 1


def test_noiseless_snr_round_trips_through_spec(tmp_path):
    spec = tmp_path / "s.yaml"
    spec.write_text(MINIMAL.replace("snr_db: 10", "snr_db: .inf"))
    assert cli.main(["train", str(spec), "--max-iterations", "2", "--output-dir", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "tiny_snr_db_inf_manifest.json").read_text())
    assert math.isinf(manifest["operating_point"])
