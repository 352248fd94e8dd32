import json
import os

import numpy as np
import pytest

from cslaudit import cli


def base_config(out_dir):
    return {
        "seed": 11,
        "out_dir": str(out_dir),
        "grammar": {
            "num_classes": 4, "feature_dim": 6, "feature_noise_sigma": 0.5,
            "class_mean_scale": 2.0, "duration_min": 8, "duration_max": 12,
            "boundary_blend": 2,
        },
        "data": {"n_train": 6, "n_val": 3, "n_test": 5},
        "corruption": {"kind": "mislabel", "fraction": 0.5,
                       "segment_len_min": 3, "segment_len_max": 6},
        "model": {"hidden_dim": 12, "head_dims": [8, 6],
                  "temporal_mode": "attention", "attention_dim": 6},
        "train": {"epochs": 4, "learning_rate": 1e-3},
        "detection": {"mode": "percentile", "k_percent": 10.0, "window": 2},
    }


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base_config(tmp_path / "run")))
    return str(path)


def run_cli(*args):
    return cli.main(list(args))


def run_pipeline(cfg_path):
    for cmd in (["gen"], ["corrupt"], ["train"]):
        assert run_cli(*cmd, "--config", cfg_path) == 0
    cfg = json.loads(open(cfg_path).read())
    # audit the corrupted test set
    cfg["data"]["audit_path"] = os.path.join(cfg["out_dir"], "test_mislabel.jsonl")
    open(cfg_path, "w").write(json.dumps(cfg))
    assert run_cli("audit", "--config", cfg_path) == 0
    assert run_cli("eval", "--config", cfg_path) == 0
    return cfg


class TestGen:
    def test_line_counts_and_rerun_identical(self, cfg_path, tmp_path):
        assert run_cli("gen", "--config", cfg_path) == 0
        run = tmp_path / "run"
        for split, n in (("train", 6), ("val", 3), ("test", 5)):
            lines = (run / f"{split}.jsonl").read_text().splitlines()
            assert len(lines) == n + 1
        first = {f: (run / f).read_bytes() for f in os.listdir(run)}
        assert run_cli("gen", "--config", cfg_path) == 0
        assert first == {f: (run / f).read_bytes() for f in os.listdir(run)}

    def test_creates_missing_out_dir(self, tmp_path):
        cfg = base_config(tmp_path / "deep" / "nested" / "run")
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert run_cli("gen", "--config", str(path)) == 0
        assert (tmp_path / "deep" / "nested" / "run" / "train.jsonl").exists()

    def test_bad_config_exit_2(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        cfg["grammar"]["duration_min"] = 0
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert run_cli("gen", "--config", str(path)) == 2

    def test_missing_config_exit_2(self):
        assert run_cli("gen", "--config", "/nonexistent/cfg.json") == 2


class TestCorrupt:
    def test_counts_and_header(self, cfg_path, tmp_path, capsys):
        run_cli("gen", "--config", cfg_path)
        assert run_cli("corrupt", "--config", cfg_path) == 0
        out = tmp_path / "run" / "test_mislabel.jsonl"
        lines = out.read_text().splitlines()
        header = json.loads(lines[0])
        spec = header["corruption_spec"]
        assert spec["kind"] == "mislabel"
        assert spec["video_fraction"] == 0.5
        corrupted = sum(1 for ln in lines[1:]
                        if json.loads(ln)["corruption"] is not None)
        assert corrupted == 3  # round(0.5 * 5)

    def test_disorder_on_train(self, cfg_path, tmp_path):
        run_cli("gen", "--config", cfg_path)
        assert run_cli("corrupt", "--config", cfg_path, "--kind", "disorder",
                       "--split", "train", "--fraction", "0.5") == 0
        out = tmp_path / "run" / "train_disorder.jsonl"
        lines = out.read_text().splitlines()
        assert sum(1 for ln in lines[1:]
                   if json.loads(ln)["corruption"] is not None) == 3


class TestTrainCmd:
    def test_prints_per_epoch_loss(self, cfg_path, tmp_path, capsys):
        run_cli("gen", "--config", cfg_path)
        assert run_cli("train", "--config", cfg_path) == 0
        out = capsys.readouterr().out
        epoch_lines = [l for l in out.splitlines() if l.startswith("epoch ")]
        assert len(epoch_lines) == 4
        assert (tmp_path / "run" / "store" / "manifest.json").exists()
        assert (tmp_path / "run" / "store" / "ckpt_0004.bin").exists()


class TestAuditCmd:
    def test_csv_shape_and_rerun_identical(self, cfg_path, tmp_path):
        run_pipeline(cfg_path)
        run = tmp_path / "run"
        csv_lines = (run / "audit.csv").read_text().splitlines()
        import cslaudit as ca
        ds = ca.read_dataset(str(run / "test_mislabel.jsonl"))
        total = sum(s.num_frames for s in ds.samples)
        assert len(csv_lines) == total + 1
        assert csv_lines[0] == ("video_id,frame,label,csl,csl_smoothed,"
                                "curvature,flag,gt_error")
        for ln in csv_lines[1:]:
            assert ln.split(",")[6] in ("0", "1")
        before = (run / "audit.csv").read_bytes()
        assert run_cli("audit", "--config", cfg_path) == 0
        assert (run / "audit.csv").read_bytes() == before

    def test_fingerprint_mismatch_refused(self, cfg_path, tmp_path, capsys):
        run_pipeline(cfg_path)
        # regenerate the audited dataset under a different grammar
        cfg = json.loads(open(cfg_path).read())
        cfg["grammar"]["feature_noise_sigma"] = 0.9
        cfg["data"]["audit_path"] = None
        other = tmp_path / "other.json"
        other.write_text(json.dumps(cfg))
        assert run_cli("gen", "--config", str(other)) == 0
        assert run_cli("audit", "--config", str(other)) == 3
        err = capsys.readouterr().err
        assert err.count("grammar") >= 2  # both fingerprints named

    def test_threshold_mode_with_calibration(self, cfg_path, tmp_path, capsys):
        run_pipeline(cfg_path)
        cfg = json.loads(open(cfg_path).read())
        cfg["detection"]["mode"] = "threshold"
        cfg["detection"]["tau"] = None
        open(cfg_path, "w").write(json.dumps(cfg))
        assert run_cli("audit", "--config", cfg_path) == 0
        out = capsys.readouterr().out
        assert "calibrated tau" in out
        profiles = json.loads((tmp_path / "run" / "profiles.json").read_text())
        assert profiles["detection"]["tau"] is not None


class TestEvalCmd:
    def test_report_schema(self, cfg_path, tmp_path):
        run_pipeline(cfg_path)
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert report["format"] == "csl-report/1"
        assert set(report) >= {"eda", "micro_auc", "k_percent", "per_video",
                               "counts", "config"}
        assert report["counts"]["videos"] == 5
        assert len(report["per_video"]) == 5

    def test_eval_without_audit_exit_3(self, cfg_path):
        run_cli("gen", "--config", cfg_path)
        assert run_cli("eval", "--config", cfg_path) == 3


class TestHeatmap:
    def test_pgm_output(self, cfg_path, tmp_path):
        cfg = run_pipeline(cfg_path)
        profiles = json.loads((tmp_path / "run" / "profiles.json").read_text())
        vid = profiles["videos"][0]
        assert run_cli("heatmap", "--config", cfg_path, "--video",
                       vid["id"]) == 0
        pgm = (tmp_path / "run" / f"heatmap_{vid['id']}.pgm").read_bytes()
        header, rest = pgm.split(b"\n", 1)
        assert header == b"P5"
        dims = rest.split(b"\n", 2)
        E, T = len(vid["losses"]), len(vid["losses"][0])
        assert dims[0] == f"{T} {E}".encode()
        assert len(dims[2]) == E * T

    def test_unknown_video_exit_3(self, cfg_path):
        run_pipeline(cfg_path)
        assert run_cli("heatmap", "--config", cfg_path, "--video", "nope") == 3

    def test_constant_and_zero_trajectories(self, tmp_path):
        path = tmp_path / "c.pgm"
        cli.write_pgm(np.full((3, 4), 2.5), str(path))
        body = path.read_bytes().split(b"\n", 3)[3]
        assert body == bytes([255] * 12)
        cli.write_pgm(np.zeros((3, 4)), str(path))
        body = path.read_bytes().split(b"\n", 3)[3]
        assert body == bytes(12)
