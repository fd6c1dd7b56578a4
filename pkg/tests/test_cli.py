"""CLI exit codes, output contracts, and end-to-end flows."""

import json

import numpy as np
import pytest

from cmpq import tensor_store as ts
from cmpq.bench import recon_error
from cmpq.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def json_lines(out):
    return [json.loads(line) for line in out.strip().splitlines() if line.startswith("{")]


@pytest.fixture
def toy_model(tmp_path, philox):
    rng = philox(0)
    weights = {
        "fc1": rng.normal(size=(40, 64)).astype(np.float32),
        "fc2": rng.normal(size=(24, 40)).astype(np.float32),
    }
    acts = {
        "fc1.acts": rng.normal(size=(100, 40)).astype(np.float32),
        "fc2.acts": rng.normal(size=(100, 24)).astype(np.float32),
    }
    w_path = tmp_path / "weights.safetensors"
    a_path = tmp_path / "acts.safetensors"
    ts.write_tensors(w_path, weights)
    ts.write_tensors(a_path, acts)
    return w_path, a_path, weights, acts


class TestCalibrate:
    def test_acts_to_norms(self, tmp_path, toy_model, capsys):
        w_path, a_path, _, acts = toy_model
        out_path = tmp_path / "norms.safetensors"
        code, out, _ = run_cli(capsys, "calibrate", "--acts", str(a_path), "--out", str(out_path))
        assert code == 0
        norms = ts.load_tensors(out_path)
        assert set(norms.entries) == {"fc1.norms", "fc2.norms"}
        expect = np.sqrt((acts["fc1.acts"].astype(np.float64) ** 2).sum(axis=0))
        np.testing.assert_allclose(norms.entries["fc1.norms"], expect, rtol=1e-6)

    def test_both_flags_is_usage_error(self, tmp_path, toy_model, capsys):
        _, a_path, _, _ = toy_model
        code, _, err = run_cli(
            capsys, "calibrate", "--acts", str(a_path), "--norms", str(a_path),
            "--out", str(tmp_path / "x.safetensors"),
        )
        assert code == 2

    def test_neither_flag_is_usage_error(self, tmp_path, capsys):
        code, _, _ = run_cli(capsys, "calibrate", "--out", str(tmp_path / "x.safetensors"))
        assert code == 2

    def test_nan_acts_names_tensor(self, tmp_path, capsys):
        bad = {"blk.acts": np.array([[1.0, np.nan]], dtype=np.float32)}
        path = tmp_path / "bad.safetensors"
        ts.write_tensors(path, bad)
        code, _, err = run_cli(
            capsys, "calibrate", "--acts", str(path), "--out", str(tmp_path / "n.safetensors")
        )
        assert code == 1
        assert "blk.acts" in err


class TestQuantize:
    def test_fractional_budget_end_to_end(self, tmp_path, toy_model, capsys):
        w_path, a_path, weights, _ = toy_model
        norms_path = tmp_path / "norms.safetensors"
        run_cli(capsys, "calibrate", "--acts", str(a_path), "--out", str(norms_path))
        out_path = tmp_path / "model.cmpq"
        code, out, _ = run_cli(
            capsys, "quantize", "--weights", str(w_path), "--norms", str(norms_path),
            "--bits", "2.2", "--out", str(out_path),
        )
        assert code == 0
        rows = json_lines(out)
        assert {r["layer"] for r in rows} == {"fc1", "fc2"}
        for row in rows:
            d_in = weights[row["layer"]].shape[0]
            assert abs(row["nominal_bits"] - 2.2) <= 2.0 / d_in
        assert ts.read_container(out_path).metadata["budget"] == 2.2

    def test_bits_out_of_range_is_usage_error(self, tmp_path, toy_model, capsys):
        w_path, a_path, _, _ = toy_model
        code, _, _ = run_cli(
            capsys, "quantize", "--weights", str(w_path), "--norms", str(a_path),
            "--bits", "5", "--out", str(tmp_path / "x.cmpq"),
        )
        assert code == 2
        assert not (tmp_path / "x.cmpq").exists()

    def test_missing_norms_names_layer(self, tmp_path, toy_model, capsys):
        w_path, _, _, _ = toy_model
        empty = tmp_path / "none.safetensors"
        ts.write_tensors(empty, {"other.norms": np.ones(4, dtype=np.float32)})
        code, _, err = run_cli(
            capsys, "quantize", "--weights", str(w_path), "--norms", str(empty),
            "--bits", "3", "--out", str(tmp_path / "x.cmpq"),
        )
        assert code == 1
        assert "fc1" in err
        assert not (tmp_path / "x.cmpq").exists()


class TestEval:
    @pytest.fixture
    def quantized(self, tmp_path, toy_model, capsys):
        w_path, a_path, _, _ = toy_model
        norms_path = tmp_path / "norms.safetensors"
        model_path = tmp_path / "model.cmpq"
        run_cli(capsys, "calibrate", "--acts", str(a_path), "--out", str(norms_path))
        run_cli(
            capsys, "quantize", "--weights", str(w_path), "--norms", str(norms_path),
            "--bits", "3", "--out", str(model_path),
        )
        capsys.readouterr()
        return model_path

    def test_matches_library_metrics(self, tmp_path, toy_model, quantized, capsys):
        w_path, a_path, weights, _ = toy_model
        code, out, _ = run_cli(
            capsys, "eval", "--cmpq", str(quantized), "--weights", str(w_path),
            "--acts", str(a_path),
        )
        assert code == 0
        rows = {r["layer"]: r for r in json_lines(out)}
        container = ts.read_container(quantized)
        for layer in container.layers:
            expect = recon_error(weights[layer.name], layer)
            assert rows[layer.name]["mse"] == expect["mse"]
            assert "output_rel_err" in rows[layer.name]

    def test_lossless_layer_reports_zero(self, tmp_path, capsys, philox):
        rng = philox(5)
        levels = np.array([-1.0, 0.0, 1.0, 2.0], dtype=np.float32)
        w = levels[rng.integers(0, 4, size=(8, 32))]
        ts.write_tensors(tmp_path / "w.safetensors", {"w": w})
        ts.write_tensors(
            tmp_path / "n.safetensors",
            {"w.norms": (np.abs(rng.normal(size=8)) + 0.1).astype(np.float32)},
        )
        run_cli(
            capsys, "quantize", "--weights", str(tmp_path / "w.safetensors"),
            "--norms", str(tmp_path / "n.safetensors"), "--bits", "2",
            "--ratio-act", "0", "--ratio-q", "0", "--out", str(tmp_path / "m.cmpq"),
        )
        code, out, _ = run_cli(
            capsys, "eval", "--cmpq", str(tmp_path / "m.cmpq"),
            "--weights", str(tmp_path / "w.safetensors"),
        )
        assert code == 0
        assert json_lines(out)[0]["mse"] == 0.0

    def test_shape_mismatch_is_data_error(self, tmp_path, toy_model, quantized, capsys):
        rng = np.random.Generator(np.random.Philox(9))
        ts.write_tensors(
            tmp_path / "wrong.safetensors",
            {"fc1": rng.normal(size=(3, 3)).astype(np.float32),
             "fc2": rng.normal(size=(3, 3)).astype(np.float32)},
        )
        code, _, _ = run_cli(
            capsys, "eval", "--cmpq", str(quantized),
            "--weights", str(tmp_path / "wrong.safetensors"),
        )
        assert code == 1


class TestBench:
    def test_unknown_suite_is_usage_error(self, tmp_path, capsys):
        code, _, _ = run_cli(
            capsys, "bench", "--suite", "nope", "--out", str(tmp_path / "r.csv")
        )
        assert code == 2

    def test_fractional_sweep_budget_grid(self, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        code, _, _ = run_cli(capsys, "bench", "--suite", "fractional-sweep", "--out", str(out))
        assert code == 0
        lines = out.read_text().strip().splitlines()
        nominals = [float(line.split(",")[1]) for line in lines[1:]]
        grid = [round(2.0 + 0.2 * i, 1) for i in range(11)]
        assert len(nominals) == len(grid)
        for nominal, budget in zip(nominals, grid):
            assert abs(nominal - budget) <= 2.0 / 96  # suite layers have d_in 96

    def test_repeat_runs_identical_minus_timing(self, tmp_path, capsys):
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        run_cli(capsys, "bench", "--suite", "outlier-sweep", "--out", str(first))
        run_cli(capsys, "bench", "--suite", "outlier-sweep", "--out", str(second))

        def strip(path):
            return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

        assert strip(first) == strip(second)


class TestInspect:
    def test_table_and_histogram(self, tmp_path, toy_model, capsys):
        w_path, a_path, weights, _ = toy_model
        norms_path = tmp_path / "n.safetensors"
        model_path = tmp_path / "m.cmpq"
        run_cli(capsys, "calibrate", "--acts", str(a_path), "--out", str(norms_path))
        run_cli(
            capsys, "quantize", "--weights", str(w_path), "--norms", str(norms_path),
            "--bits", "2.6", "--out", str(model_path),
        )
        capsys.readouterr()
        code, out, _ = run_cli(capsys, "inspect", "--cmpq", str(model_path))
        assert code == 0
        assert "fc1" in out and "fc2" in out
        container = ts.read_container(model_path)
        for layer in container.layers:
            hist = layer.precision.histogram()
            assert sum(hist.values()) == layer.d_in

    def test_truncated_container_is_data_error(self, tmp_path, toy_model, capsys):
        w_path, a_path, _, _ = toy_model
        norms_path = tmp_path / "n.safetensors"
        model_path = tmp_path / "m.cmpq"
        run_cli(capsys, "calibrate", "--acts", str(a_path), "--out", str(norms_path))
        run_cli(
            capsys, "quantize", "--weights", str(w_path), "--norms", str(norms_path),
            "--bits", "3", "--out", str(model_path),
        )
        capsys.readouterr()
        (tmp_path / "cut.cmpq").write_bytes(model_path.read_bytes()[:-25])
        code, _, _ = run_cli(capsys, "inspect", "--cmpq", str(tmp_path / "cut.cmpq"))
        assert code == 1


class TestThreads:
    def test_env_fallback(self, monkeypatch):
        from cmpq.cli import _resolve_threads

        monkeypatch.setenv("CMPQ_THREADS", "3")
        assert _resolve_threads(None) == 3
        assert _resolve_threads(2) == 2
        monkeypatch.delenv("CMPQ_THREADS")
        assert _resolve_threads(None) == 1

    def test_bad_env_value(self, monkeypatch):
        from cmpq.cli import _resolve_threads
        from cmpq.errors import CmpqUsageError

        monkeypatch.setenv("CMPQ_THREADS", "lots")
        with pytest.raises(CmpqUsageError):
            _resolve_threads(None)
