"""Audit core: loss trajectories over checkpoints, CSL, smoothing, flagging.

For each audited sequence we run one eval-mode forward pass per saved
checkpoint (temporal context intact), record per-frame cross-entropy against
the annotated labels, average over checkpoints to get the per-frame CSL,
smooth with a truncated moving window, and flag frames either above a
threshold (strict >) or in the per-video top-k% of smoothed CSL.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import ConfigError, DataError, FingerprintError
from .seqdata import SequenceSample, grammar_fingerprint
from .trainer import CheckpointStore

UNWEIGHTED = "unweighted"
TRAIN_WEIGHTED = "train_weighted"

THRESHOLD = "threshold"
PERCENTILE = "percentile"


@dataclass(frozen=True)
class DetectionConfig:
    mode: str = PERCENTILE           # "threshold" | "percentile"
    tau: float = 0.0                 # threshold mode
    k_percent: float = 10.0          # percentile mode
    window: int = 5
    audit_loss: str = UNWEIGHTED     # "unweighted" | "train_weighted"
    min_segment_len: int = 1

    def __post_init__(self):
        if self.mode not in (THRESHOLD, PERCENTILE):
            raise ConfigError(f"unknown detection mode {self.mode!r}")
        if self.mode == THRESHOLD and not np.isfinite(self.tau):
            raise ConfigError("tau must be finite")
        if self.mode == PERCENTILE and not 0 < self.k_percent <= 100:
            raise ConfigError("k_percent must lie in (0, 100]")
        if self.window < 0:
            raise ConfigError("window must be >= 0")
        if self.audit_loss not in (UNWEIGHTED, TRAIN_WEIGHTED):
            raise ConfigError(f"unknown audit_loss {self.audit_loss!r}")
        if self.min_segment_len < 1:
            raise ConfigError("min_segment_len must be >= 1")


@dataclass
class LossTrajectory:
    video_id: str
    losses: np.ndarray   # (E, T), entry (e, t) = loss of frame t at epoch e
    epochs: list[int]

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.ndim != 2:
            raise ConfigError("losses must be a 2-D (epochs x frames) matrix")
        if self.losses.shape[0] != len(self.epochs):
            raise ConfigError("losses row count does not match epoch list")
        if not np.all(np.isfinite(self.losses)) or np.any(self.losses < 0):
            raise ConfigError("losses must be finite and nonnegative")


@dataclass
class CslProfile:
    video_id: str
    csl: np.ndarray        # (T,)
    smoothed: np.ndarray   # (T,)
    window: int
    flags: np.ndarray      # (T,) int
    segments: list[tuple[int, int]]
    mode: str
    param: float           # tau or k_percent, per mode


def check_compatible(store: CheckpointStore, sample: SequenceSample,
                     grammar_fp: str | None = None) -> None:
    cfg = store.model_config
    if sample.frames.shape[1] != cfg.feature_dim:
        raise FingerprintError(
            f"sample {sample.id}: feature dim {sample.frames.shape[1]} != model "
            f"feature_dim {cfg.feature_dim} "
            f"(store grammar {store.manifest['fingerprints']['grammar']})")
    if grammar_fp is not None \
            and grammar_fp != store.manifest["fingerprints"]["grammar"]:
        raise FingerprintError(
            f"dataset grammar {grammar_fp} != store grammar "
            f"{store.manifest['fingerprints']['grammar']}")


def eval_loss_trajectory(store: CheckpointStore, sample: SequenceSample,
                         cfg: DetectionConfig) -> LossTrajectory:
    """Per-frame loss under every checkpoint: exactly E eval forward passes."""
    if not store.snapshots:
        raise DataError("checkpoint store is empty")
    check_compatible(store, sample)
    model_cfg = store.model_config
    if cfg.audit_loss == TRAIN_WEIGHTED:
        alpha = store.class_weights
    else:
        alpha = np.ones(model_cfg.num_classes)
    rows = []
    for _, params, _ in store.snapshots:
        trace = M.forward(params, model_cfg, sample.frames, train=False)
        rows.append(M.per_frame_losses(trace.probs, sample.labels, alpha))
    return LossTrajectory(video_id=sample.id, losses=np.stack(rows),
                          epochs=list(store.epochs))


def compute_csl(traj: LossTrajectory) -> np.ndarray:
    """Columnwise mean over epochs."""
    return traj.losses.mean(axis=0)


def smooth_csl(csl: np.ndarray, w: int) -> np.ndarray:
    """Moving average with radius w; windows truncate at sequence edges and
    divide by the actual in-range count."""
    if w < 0:
        raise ConfigError("window radius must be >= 0")
    csl = np.asarray(csl, dtype=np.float64)
    if w == 0:
        return csl.copy()
    kernel = np.ones(2 * w + 1)
    sums = np.convolve(csl, kernel, mode="same")
    counts = np.convolve(np.ones_like(csl), kernel, mode="same")
    return sums / counts


def flag_threshold(smoothed: np.ndarray, tau: float) -> np.ndarray:
    if not np.isfinite(tau):
        raise ConfigError("tau must be finite")
    return (np.asarray(smoothed) > tau).astype(np.int8)


def flag_percentile(smoothed: np.ndarray, k_percent: float) -> np.ndarray:
    """Flag the ceil(k/100 * T) highest values; ties broken by lower index."""
    if not 0 < k_percent <= 100:
        raise ConfigError("k_percent must lie in (0, 100]")
    smoothed = np.asarray(smoothed)
    T = len(smoothed)
    m = int(np.ceil(k_percent / 100.0 * T))
    order = np.argsort(-smoothed, kind="stable")
    flags = np.zeros(T, dtype=np.int8)
    flags[order[:m]] = 1
    return flags


def calibrate_tau(validation_profiles: list[CslProfile], q: float = 0.95) -> float:
    """Empirical q-quantile (linear interpolation) of smoothed CSL pooled over
    all validation frames. Assumes the validation set is clean."""
    if not 0 < q < 1:
        raise ConfigError("quantile must lie in (0, 1)")
    pool = np.concatenate([p.smoothed for p in validation_profiles]) \
        if validation_profiles else np.array([])
    if pool.size == 0:
        raise DataError("cannot calibrate tau from an empty validation pool")
    return float(np.quantile(pool, q))


def frames_to_segments(flags: np.ndarray,
                       min_segment_len: int = 1) -> list[tuple[int, int]]:
    """Maximal runs of 1s as half-open intervals; runs shorter than
    min_segment_len are dropped from the list (flags themselves untouched)."""
    flags = np.asarray(flags)
    segments = []
    start = None
    for t in range(len(flags) + 1):
        on = t < len(flags) and flags[t]
        if on and start is None:
            start = t
        elif not on and start is not None:
            if t - start >= min_segment_len:
                segments.append((start, t))
            start = None
    return segments


def trajectory_curvature(traj: LossTrajectory) -> np.ndarray:
    """Mean absolute discrete second difference of each frame's loss over
    epochs; requires at least 3 checkpoints."""
    E = traj.losses.shape[0]
    if E < 3:
        raise DataError(f"curvature needs >= 3 checkpoints, store has {E}")
    return np.abs(np.diff(traj.losses, n=2, axis=0)).mean(axis=0)


def audit_sequence(store: CheckpointStore, sample: SequenceSample,
                   cfg: DetectionConfig) -> CslProfile:
    """Trajectory -> CSL -> smoothing -> flagging -> segments."""
    traj = eval_loss_trajectory(store, sample, cfg)
    csl = compute_csl(traj)
    smoothed = smooth_csl(csl, cfg.window)
    if cfg.mode == THRESHOLD:
        flags = flag_threshold(smoothed, cfg.tau)
        param = cfg.tau
    else:
        flags = flag_percentile(smoothed, cfg.k_percent)
        param = cfg.k_percent
    segments = frames_to_segments(flags, cfg.min_segment_len)
    return CslProfile(video_id=sample.id, csl=csl, smoothed=smoothed,
                      window=cfg.window, flags=flags, segments=segments,
                      mode=cfg.mode, param=param)
