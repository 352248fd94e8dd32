"""Command-line pipeline: gen, corrupt, train, audit, eval, heatmap.

A single JSON config file drives every command; individual flags override
fields. All outputs are deterministic given the config, and every artifact
embeds the configuration and seeds that produced it.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import csl as CSL
from . import metrics as MET
from . import model as M
from . import seqdata as SD
from . import trainer as TR
from .errors import (AuditToolError, ConfigError, DataError, NumericError,
                     ParseError)

PROFILES_FORMAT = "csl-profiles/1"


def _fmt(x: float) -> str:
    """Shortest round-trip decimal representation."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# config handling


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": ".",
    "workers": 1,
    "grammar": {
        "num_classes": 6,
        "feature_dim": 16,
        "feature_noise_sigma": 1.0,
        "class_mean_scale": 2.8284271247461903,   # pairwise distance 4.0
        "class_means": None,
        "phase_order": None,                      # default 0..C-1
        "duration_min": 40,
        "duration_max": 80,
        "boundary_blend": 3,
    },
    "data": {
        "n_train": 40, "n_val": 10, "n_test": 20,
        "train_path": None, "val_path": None, "audit_path": None,
    },
    "corruption": {
        "kind": "mislabel", "fraction": 0.5, "split": "test",
        "segment_len_min": 30, "segment_len_max": 80, "seed": None,
    },
    "model": {
        "hidden_dim": 32, "head_dims": [16, 8], "temporal_mode": "attention",
        "attention_dim": 16, "dropout_rates": [0.5, 0.3],
        "init_seed": None, "init_scale": 1.0,
    },
    "train": {
        "epochs": 50, "learning_rate": 1e-4, "beta1": 0.9, "beta2": 0.999,
        "eps": 1e-8, "weight_decay": 0.01, "shuffle_seed": None,
        "checkpoint_stride": 1, "dropout": True,
    },
    "detection": {
        "mode": "percentile", "k_percent": 10.0, "tau": None, "window": 5,
        "audit_loss": "unweighted", "min_segment_len": 1,
        "calibration_quantile": 0.95,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def build_grammar(cfg: dict) -> SD.PhaseGrammar:
    g = cfg["grammar"]
    C, d = int(g["num_classes"]), int(g["feature_dim"])
    if g.get("class_means") is not None:
        means = np.asarray(g["class_means"], dtype=np.float64)
    else:
        if d < C:
            raise ConfigError(
                "feature_dim must be >= num_classes for default class means")
        means = np.zeros((C, d))
        means[np.arange(C), np.arange(C)] = float(g["class_mean_scale"])
    order = g.get("phase_order") or list(range(C))
    return SD.PhaseGrammar(
        num_classes=C, feature_dim=d, class_means=means,
        feature_noise_sigma=float(g["feature_noise_sigma"]),
        phase_order=tuple(order),
        duration_min=int(g["duration_min"]),
        duration_max=int(g["duration_max"]),
        boundary_blend=int(g["boundary_blend"]))


def build_model_config(cfg: dict, grammar: SD.PhaseGrammar) -> M.ModelConfig:
    m = cfg["model"]
    init_seed = m["init_seed"] if m["init_seed"] is not None \
        else int(cfg["seed"]) + 100
    return M.ModelConfig(
        feature_dim=grammar.feature_dim, num_classes=grammar.num_classes,
        hidden_dim=int(m["hidden_dim"]),
        head_dims=tuple(int(x) for x in m["head_dims"]),
        temporal_mode=m["temporal_mode"],
        attention_dim=int(m["attention_dim"]),
        dropout_rates=tuple(float(x) for x in m["dropout_rates"]),
        init_seed=init_seed, init_scale=float(m["init_scale"]))


def build_train_config(cfg: dict) -> TR.TrainConfig:
    t = cfg["train"]
    shuffle_seed = t["shuffle_seed"] if t["shuffle_seed"] is not None \
        else int(cfg["seed"]) + 200
    return TR.TrainConfig(
        epochs=int(t["epochs"]), learning_rate=float(t["learning_rate"]),
        beta1=float(t["beta1"]), beta2=float(t["beta2"]), eps=float(t["eps"]),
        weight_decay=float(t["weight_decay"]), shuffle_seed=shuffle_seed,
        checkpoint_stride=int(t["checkpoint_stride"]), dropout=bool(t["dropout"]))


def build_detection_config(cfg: dict, tau: float | None = None) -> CSL.DetectionConfig:
    d = cfg["detection"]
    return CSL.DetectionConfig(
        mode=d["mode"],
        tau=float(tau if tau is not None else (d["tau"] or 0.0)),
        k_percent=float(d["k_percent"]), window=int(d["window"]),
        audit_loss=d["audit_loss"], min_segment_len=int(d["min_segment_len"]))


def _path(cfg: dict, name: str) -> str:
    return os.path.join(cfg["out_dir"], name)


def _split_path(cfg: dict, split: str) -> str:
    key = {"train": "train_path", "val": "val_path"}.get(split)
    if key and cfg["data"].get(key):
        return cfg["data"][key]
    return _path(cfg, f"{split}.jsonl")


def _audit_path(cfg: dict) -> str:
    return cfg["data"].get("audit_path") or _path(cfg, "test.jsonl")


def _store_path(cfg: dict) -> str:
    return _path(cfg, "store")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict) -> None:
    grammar = build_grammar(cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    counts = {"train": int(cfg["data"]["n_train"]),
              "val": int(cfg["data"]["n_val"]),
              "test": int(cfg["data"]["n_test"])}
    base = int(cfg["seed"])
    for i, (split, n) in enumerate(counts.items()):
        ds = SD.generate_dataset(grammar, n, split, seed=base + i)
        SD.write_dataset(ds, _split_path(cfg, split))
        print(f"{split}: {n} sequences, "
              f"{sum(s.num_frames for s in ds.samples)} frames")


def cmd_corrupt(cfg: dict, kind: str | None, fraction: float | None,
                split: str | None, out_file: str | None) -> None:
    c = cfg["corruption"]
    kind = kind or c["kind"]
    fraction = fraction if fraction is not None else float(c["fraction"])
    split = split or c["split"]
    spec = SD.CorruptionSpec(
        kind=kind, video_fraction=fraction,
        segment_len_min=int(c["segment_len_min"]),
        segment_len_max=int(c["segment_len_max"]),
        seed=int(c["seed"]) if c["seed"] is not None else int(cfg["seed"]) + 10)
    ds = SD.read_dataset(_split_path(cfg, split))
    corrupted = SD.corrupt_dataset(ds, spec)
    out = out_file or _path(cfg, f"{split}_{kind}.jsonl")
    SD.write_dataset(corrupted, out, header_extra={"corruption_spec": spec.to_dict()})
    n_corrupt = sum(1 for s in corrupted.samples if s.corruption is not None)
    print(f"corrupted {n_corrupt}/{len(corrupted.samples)} sequences -> {out}")


def cmd_train(cfg: dict) -> None:
    ds = SD.read_dataset(_split_path(cfg, "train"))
    model_cfg = build_model_config(cfg, ds.grammar)
    train_cfg = build_train_config(cfg)
    store = TR.train(ds, model_cfg, train_cfg, _store_path(cfg))
    for epoch, loss in zip(store.manifest["epochs"],
                           store.manifest["epoch_losses"]):
        print(f"epoch {epoch}: mean loss {loss:.6f}")


def _compute_tau(cfg: dict, store: TR.CheckpointStore,
                 det: CSL.DetectionConfig) -> float:
    """Calibrate tau from the (assumed clean) validation split."""
    val = SD.read_dataset(_split_path(cfg, "val"))
    profiles = []
    for sample in val.samples:
        traj = CSL.eval_loss_trajectory(store, sample, det)
        smoothed = CSL.smooth_csl(CSL.compute_csl(traj), det.window)
        profiles.append(CSL.CslProfile(
            video_id=sample.id, csl=smoothed, smoothed=smoothed,
            window=det.window, flags=np.zeros(len(smoothed), dtype=np.int8),
            segments=[], mode=CSL.THRESHOLD, param=0.0))
    return CSL.calibrate_tau(profiles, float(cfg["detection"]["calibration_quantile"]))


def cmd_audit(cfg: dict) -> None:
    store = TR.load_store(_store_path(cfg))
    ds = SD.read_dataset(_audit_path(cfg))
    ds_fp = SD.grammar_fingerprint(ds.grammar)
    store_fp = store.manifest["fingerprints"]["grammar"]
    if ds_fp != store_fp:
        raise CSL.FingerprintError(
            f"store/dataset mismatch: store grammar {store_fp}, "
            f"dataset grammar {ds_fp}")
    det = build_detection_config(cfg)
    tau = None
    if det.mode == CSL.THRESHOLD and cfg["detection"]["tau"] is None:
        tau = _compute_tau(cfg, store, det)
        det = build_detection_config(cfg, tau=tau)

    E = len(store)
    videos = []
    csv_lines = ["video_id,frame,label,csl,csl_smoothed,curvature,flag,gt_error"]
    for sample in ds.samples:
        traj = CSL.eval_loss_trajectory(store, sample, det)
        csl = CSL.compute_csl(traj)
        smoothed = CSL.smooth_csl(csl, det.window)
        curvature = CSL.trajectory_curvature(traj) if E >= 3 \
            else np.full(len(csl), np.nan)
        if det.mode == CSL.THRESHOLD:
            flags = CSL.flag_threshold(smoothed, det.tau)
        else:
            flags = CSL.flag_percentile(smoothed, det.k_percent)
        segments = CSL.frames_to_segments(flags, det.min_segment_len)
        for t in range(len(csl)):
            csv_lines.append(
                f"{sample.id},{t},{int(sample.labels[t])},{_fmt(csl[t])},"
                f"{_fmt(smoothed[t])},{_fmt(curvature[t])},{int(flags[t])},"
                f"{int(sample.error_mask[t])}")
        videos.append({
            "id": sample.id,
            "epochs": list(store.epochs),
            "losses": traj.losses.tolist(),
            "csl": csl.tolist(),
            "smoothed": smoothed.tolist(),
            "curvature": curvature.tolist(),
            "flags": flags.tolist(),
            "segments": [list(s) for s in segments],
            "labels": sample.labels.tolist(),
            "gt_error": sample.error_mask.tolist(),
        })
    profiles = {
        "format": PROFILES_FORMAT,
        "store_fingerprints": store.manifest["fingerprints"],
        "detection": dict(cfg["detection"], tau=det.tau if det.mode == CSL.THRESHOLD
                          else cfg["detection"]["tau"]),
        "seed": cfg["seed"],
        "videos": videos,
    }
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(_path(cfg, "audit.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(csv_lines) + "\n")
    with open(_path(cfg, "profiles.json"), "w", encoding="utf-8") as f:
        json.dump(profiles, f, sort_keys=True)
        f.write("\n")
    n_frames = sum(len(v["csl"]) for v in videos)
    print(f"audited {len(videos)} videos ({n_frames} frames) "
          f"over {E} checkpoints")
    if tau is not None:
        print(f"calibrated tau = {_fmt(tau)}")


def _load_profiles(cfg: dict) -> dict:
    path = _path(cfg, "profiles.json")
    if not os.path.exists(path):
        raise DataError(f"no audit artifacts at {path}; run audit first")
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if data.get("format") != PROFILES_FORMAT:
        raise ParseError(f"unexpected profiles format {data.get('format')!r}")
    return data


def cmd_eval(cfg: dict) -> None:
    profiles = _load_profiles(cfg)
    inputs = [MET.EvalInput(video_id=v["id"],
                            scores=np.asarray(v["smoothed"]),
                            gt_mask=np.asarray(v["gt_error"], dtype=np.int8),
                            gt_segments=CSL.frames_to_segments(
                                np.asarray(v["gt_error"])))
              for v in profiles["videos"]]
    report = MET.build_report(
        inputs, k_percent=float(cfg["detection"]["k_percent"]),
        config={"detection": cfg["detection"], "seed": cfg["seed"]})
    if report.micro_auc is None:
        print("warning: micro-AUC undefined (single-class ground truth)",
              file=sys.stderr)
    if report.eda is None:
        print("warning: EDA undefined (no ground-truth erroneous segments)",
              file=sys.stderr)
    out = _path(cfg, "report.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    auc_s = "n/a" if report.micro_auc is None else f"{report.micro_auc:.4f}"
    eda_s = "n/a" if report.eda is None else f"{report.eda:.4f}"
    print(f"micro-AUC {auc_s}, EDA@{report.k_percent:g}% {eda_s} -> {out}")


def write_pgm(losses: np.ndarray, path: str) -> None:
    """Binary PGM (P5): width T, height E, pixel = round(255 * l / max)."""
    losses = np.asarray(losses, dtype=np.float64)
    peak = losses.max()
    if peak > 0:
        pixels = np.round(255.0 * losses / peak).astype(np.uint8)
    else:
        pixels = np.zeros_like(losses, dtype=np.uint8)
    E, T = losses.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{T} {E}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def cmd_heatmap(cfg: dict, video: str | None) -> None:
    profiles = _load_profiles(cfg)
    by_id = {v["id"]: v for v in profiles["videos"]}
    if video is not None:
        if video not in by_id:
            raise DataError(f"unknown video id {video!r}")
        targets = [video]
    else:
        targets = list(by_id)
    for vid in targets:
        path = _path(cfg, f"heatmap_{vid}.pgm")
        write_pgm(np.asarray(by_id[vid]["losses"]), path)
        print(f"wrote {path}")


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cslaudit",
        description="Annotation-error detection via checkpointed loss trajectories")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, help="override global seed")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--workers", type=int, help="worker count (audit)")

    common(sub.add_parser("gen", help="generate train/val/test datasets"))
    p = sub.add_parser("corrupt", help="inject annotation errors")
    common(p)
    p.add_argument("--kind", choices=["mislabel", "disorder"])
    p.add_argument("--fraction", type=float)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--out-file")
    common(sub.add_parser("train", help="train and checkpoint every epoch"))
    common(sub.add_parser("audit", help="compute CSL profiles and flags"))
    common(sub.add_parser("eval", help="score detection against ground truth"))
    p = sub.add_parser("heatmap", help="export loss-trajectory heatmaps (PGM)")
    common(p)
    p.add_argument("--video", help="video id (default: all audited videos)")
    return parser


def run(argv: list[str] | None = None) -> None:
    args = _build_parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.command == "gen":
        cmd_gen(cfg)
    elif args.command == "corrupt":
        cmd_corrupt(cfg, args.kind, args.fraction, args.split, args.out_file)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "audit":
        cmd_audit(cfg)
    elif args.command == "eval":
        cmd_eval(cfg)
    elif args.command == "heatmap":
        cmd_heatmap(cfg, args.video)


def main(argv: list[str] | None = None) -> int:
    try:
        run(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except AuditToolError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
