"""
Evaluation: volume-level Dice, prediction-consistency scoring over kernel
pairs, k-fold cross-validation, and the one-sided Wilcoxon signed-rank test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

from .adapt import TrainConfig, TrainData, predict_probs, train
from .datagen import DatasetBundle, PairedSample, Volume, split_folds
from .segnet import ModelBundle

__all__ = [
    "MetricsReport",
    "dice",
    "consistency_dice",
    "cross_validate",
    "wilcoxon_one_sided",
    "evaluate_bundle",
]

PRED_THRESHOLD = 0.5


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice overlap ``2|A∩B| / (|A|+|B|)`` with the convention Dice(∅,∅)=1."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.dtype != bool:
        if not np.isin(pred, (0, 1)).all():
            raise ValueError("pred_mask must be binary")
        pred = pred.astype(bool)
    if gt.dtype != bool:
        if not np.isin(gt, (0, 1)).all():
            raise ValueError("gt_mask must be binary")
        gt = gt.astype(bool)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def _volume_dice(bundle: ModelBundle, volume: Volume) -> tuple[float, list[float]]:
    """Dice pooled over the volume's slices, plus the per-slice scores."""
    images = np.stack([s.image for s in volume.slices])
    probs = predict_probs(bundle, images)
    pred = probs >= PRED_THRESHOLD
    gt = np.stack([s.lesion_mask for s in volume.slices])
    return dice(pred, gt), [dice(pred[i], gt[i]) for i in range(pred.shape[0])]


def consistency_dice(
    bundle: ModelBundle, paired_test: list[PairedSample]
) -> tuple[dict[str, float], float]:
    """Per-family mean Dice between binarized predictions on each pair.

    Families with no pairs are skipped; the overall score is the unweighted
    mean over the families present.
    """
    by_family: dict[str, list[float]] = {}
    smooth = np.stack([p.image_smooth for p in paired_test])
    sharp = np.stack([p.image_sharp for p in paired_test])
    probs_smooth = predict_probs(bundle, smooth)
    probs_sharp = predict_probs(bundle, sharp)
    for i, pair in enumerate(paired_test):
        score = dice(probs_smooth[i] >= PRED_THRESHOLD, probs_sharp[i] >= PRED_THRESHOLD)
        by_family.setdefault(pair.family, []).append(score)
    per_family = {fam: float(np.mean(vals)) for fam, vals in sorted(by_family.items())}
    mean = float(np.mean(list(per_family.values())))
    return per_family, mean


@dataclass
class MetricsReport:
    """Cross-validation results for one method."""

    method: str
    source_val_dice: list[float] = field(default_factory=list)  # per fold
    target_dice: list[float] = field(default_factory=list)  # per fold
    twin_dice: list[float] = field(default_factory=list)  # per fold, smooth twins
    consistency_per_family: dict[str, list[float]] = field(default_factory=dict)
    consistency_mean: list[float] = field(default_factory=list)  # per fold
    per_image: dict[str, list[float]] = field(default_factory=dict)
    p_values: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        out = {
            "source_val_dice_mean": float(np.mean(self.source_val_dice)),
            "source_val_dice_std": float(np.std(self.source_val_dice)),
            "target_dice_mean": float(np.mean(self.target_dice)),
            "target_dice_std": float(np.std(self.target_dice)),
            "consistency_mean": float(np.mean(self.consistency_mean)),
            "consistency_std": float(np.std(self.consistency_mean)),
        }
        if self.twin_dice:
            out["twin_dice_mean"] = float(np.mean(self.twin_dice))
        for fam, vals in sorted(self.consistency_per_family.items()):
            out[f"consistency_{fam}"] = float(np.mean(vals))
        return out

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path: str | Path) -> "MetricsReport":
        with open(path) as fh:
            return cls(**json.load(fh))


def evaluate_bundle(
    model: ModelBundle,
    data: DatasetBundle,
    val_volumes: list[Volume] | None = None,
) -> dict:
    """Score one trained model on validation/target/twin volumes and pairs.

    ``source_val``/``target``/``twin`` hold volume-level (slice-pooled) Dice;
    the ``*_slices`` keys hold the flat per-slice scores in volume order.
    """
    res: dict = {}
    groups = {"target": data.target_volumes, "twin": data.target_twin_volumes}
    if val_volumes:
        groups["source_val"] = val_volumes
    for name, volumes in groups.items():
        scored = [_volume_dice(model, v) for v in volumes]
        res[name] = [pooled for pooled, _ in scored]
        res[f"{name}_slices"] = [s for _, slices in scored for s in slices]
    per_family, mean = consistency_dice(model, data.paired_test)
    res["consistency_per_family"] = per_family
    res["consistency_mean"] = mean
    return res


def _fold_seed(base_seed: int, fold: int) -> int:
    import hashlib

    digest = hashlib.sha256(f"fold:{base_seed}:{fold}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def cross_validate(
    config: TrainConfig,
    data: DatasetBundle,
    k: int = 5,
    seed: int = 0,
    train_pairs: list[PairedSample] | None = None,
) -> MetricsReport:
    """k-fold cross-validation of one training configuration.

    Source volumes are partitioned into k folds; each fold trains on the
    other k-1 and is scored on (a) its held-out source volumes, (b) the sharp
    target test volumes, (c) the smooth twins of those volumes, and (d) the
    paired test set (consistency).  Per-image scores are retained for
    significance testing.
    """
    if k < 2:
        raise ValueError("fold count must be >= 2")
    folds = split_folds(data.source_volumes, k=k, seed=seed)
    pairs = data.paired_train if train_pairs is None else train_pairs
    report = MetricsReport(method=config.method)
    report.per_image = {"source_val": [], "target": [], "twin": []}
    for fold in range(k):
        val_ids = set(folds.fold_ids(fold))
        train_vols = [v for i, v in enumerate(data.source_volumes) if i not in val_ids]
        val_vols = [v for i, v in enumerate(data.source_volumes) if i in val_ids]
        fold_config = replace(config, seed=_fold_seed(config.seed, fold))
        model, _ = train(fold_config, TrainData(train_vols, list(pairs)))
        scores = evaluate_bundle(model, data, val_volumes=val_vols)
        report.source_val_dice.append(float(np.mean(scores["source_val"])))
        report.target_dice.append(float(np.mean(scores["target"])))
        report.twin_dice.append(float(np.mean(scores["twin"])))
        report.consistency_mean.append(scores["consistency_mean"])
        for fam, val in scores["consistency_per_family"].items():
            report.consistency_per_family.setdefault(fam, []).append(val)
        report.per_image["source_val"].extend(scores["source_val_slices"])
        report.per_image["target"].extend(scores["target_slices"])
        report.per_image["twin"].extend(scores["twin_slices"])
    return report


def wilcoxon_one_sided(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """One-sided Wilcoxon signed-rank test of H1: a < b.

    Zero differences are discarded; |differences| are ranked with average
    ranks on ties.  For n <= 12 the p-value is computed by exact enumeration
    of all 2^n sign assignments of the ranks; for larger n the normal
    approximation with tie correction and continuity correction is used.
    The reversed alternative is obtained by swapping the arguments.

    Returns
    -------
    float
        P(W+ <= observed) under H0, where W+ sums the ranks of positive
        differences a - b.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be 1D of equal length")
    if a.size < 5:
        raise ValueError("need at least 5 paired observations")
    d = a - b
    d = d[d != 0.0]
    if d.size == 0:
        raise ValueError("all differences are zero; test undefined")
    n = d.size
    ranks = rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    if n <= 12:
        # enumerate every sign assignment of the ranks
        signs = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        sums = signs @ ranks
        return float(np.mean(sums <= w_pos + 1e-12))
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float((counts**3 - counts).sum()) / 48.0
    sigma = np.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_pos - mu + 0.5) / sigma
    return float(norm.cdf(z))
