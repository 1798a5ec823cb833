"""AUROC evaluation of image- and pixel-level anomaly scores.

AUROC is computed as the Mann-Whitney statistic P(score_anom > score_good) +
0.5 * P(tie) through average ranks, O(n log n). Pixel-level evaluation pools
every pixel of every test image into one labeled set, so a category gets a
single localization number.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EbadError, ShapeMismatchError
from .scoring import ImageScore, ScoreMap

# Full-scale MVTec reference AUROCs for this method (runbook targets; not
# reproducible at desk scale). Detection numbers are 15-category averages.
REFERENCE_DETECTION_AVERAGE = {"energy": 0.56, "raw": 0.69, "standardized": 0.72}
REFERENCE_LOCALIZATION = {
    "carpet": (0.53, 0.63),
    "grid": (0.86, 0.86),
    "leather": (0.43, 0.86),
    "tile": (0.50, 0.57),
    "wood": (0.73, 0.74),
    "bottle": (0.70, 0.72),
    "cable": (0.46, 0.56),
    "capsule": (0.44, 0.64),
    "hazelnut": (0.73, 0.78),
    "metal_nut": (0.71, 0.65),
    "pill": (0.71, 0.74),
    "screw": (0.88, 0.87),
    "toothbrush": (0.82, 0.68),
    "transistor": (0.74, 0.74),
    "zipper": (0.64, 0.55),
}


class SingleClassError(EbadError):
    """AUROC needs at least one good and one anomalous score."""


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray  # 0 = good, 1 = anomalous

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int8)
        if self.scores.shape != self.labels.shape:
            raise ShapeMismatchError(
                f"{self.scores.size} scores vs {self.labels.size} labels")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (good) or 1 (anomalous)")

    def require_both_classes(self) -> None:
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == self.labels.size:
            raise SingleClassError(
                f"need both classes, got {n_pos} anomalous of {self.labels.size}")


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    group_start = np.r_[True, sorted_vals[1:] != sorted_vals[:-1]]
    group_id = np.cumsum(group_start) - 1
    counts = np.diff(np.r_[np.nonzero(group_start)[0], values.size])
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0  # mean of each tied run's 1-based ranks
    ranks = np.empty(values.size, dtype=float)
    ranks[order] = avg_rank[group_id]
    return ranks


def auroc(data: LabeledScores) -> float:
    """Mann-Whitney AUROC with half credit for ties."""
    data.require_both_classes()
    ranks = _average_ranks(data.scores)
    pos = data.labels == 1
    n_pos = int(pos.sum())
    n_neg = data.labels.size - n_pos
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class RocCurve:
    """Operating points swept over descending score thresholds.

    Point k uses the rule "anomalous if score >= thresholds[k]"; the first
    point is (0, 0) at threshold +inf and the last is (1, 1).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, f, tp in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([repr(float(t)), repr(float(f)), repr(float(tp))])


def roc_curve(data: LabeledScores) -> RocCurve:
    data.require_both_classes()
    order = np.argsort(-data.scores, kind="mergesort")
    sorted_scores = data.scores[order]
    sorted_labels = data.labels[order]
    distinct = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tp = np.cumsum(sorted_labels)[distinct]
    fp = distinct + 1 - tp
    n_pos = int(data.labels.sum())
    n_neg = data.labels.size - n_pos
    thresholds = np.r_[np.inf, sorted_scores[distinct]]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auroc=auroc(data))


def image_level_eval(scores, labels) -> dict[str, float]:
    """AUROC per score kind. Each element of scores holds the ImageScore(s) of
    one test image (a single score or an iterable over kinds)."""
    labels = np.asarray(labels).ravel()
    if len(scores) != labels.size:
        raise ShapeMismatchError(f"{len(scores)} score entries vs {labels.size} labels")
    by_kind: dict[str, list[float]] = {}
    for entry in scores:
        items = [entry] if isinstance(entry, ImageScore) else list(entry)
        for s in items:
            by_kind.setdefault(s.kind, []).append(s.value)
    out = {}
    for kind, values in by_kind.items():
        if len(values) != labels.size:
            raise ShapeMismatchError(
                f"kind {kind!r} has {len(values)} scores for {labels.size} images")
        out[kind] = auroc(LabeledScores(np.asarray(values), labels))
    return out


def pixel_level_eval(score_maps, ground_truth_masks) -> float:
    """Pooled pixel AUROC: flattens every pixel of every image into one set."""
    if len(score_maps) != len(ground_truth_masks):
        raise ShapeMismatchError(
            f"{len(score_maps)} score maps vs {len(ground_truth_masks)} masks")
    all_scores, all_labels = [], []
    for i, (smap, mask) in enumerate(zip(score_maps, ground_truth_masks)):
        values = smap.values if isinstance(smap, ScoreMap) else np.asarray(smap, dtype=float)
        mask = np.asarray(mask)
        if mask.shape != values.shape:
            raise ShapeMismatchError(
                f"image {i}: mask shape {mask.shape} != score map shape {values.shape}")
        if not np.isin(mask, (0, 1)).all() and not np.isin(mask, (False, True)).all():
            raise ValueError(f"image {i}: mask must be binary")
        all_scores.append(values.ravel())
        all_labels.append(mask.astype(np.int8).ravel())
    data = LabeledScores(np.concatenate(all_scores), np.concatenate(all_labels))
    return auroc(data)


# ---------------------------------------------------------------------------
# Histograms with three-sigma thresholds
# ---------------------------------------------------------------------------

@dataclass
class HistogramReport:
    bin_edges: np.ndarray
    good_density: np.ndarray
    defect_density: np.ndarray
    threshold: float  # mean(good) + 3 * std(good)
    good_mean: float
    good_std: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "good_density", "defect_density"])
            for k in range(self.good_density.size):
                writer.writerow([repr(float(self.bin_edges[k])),
                                 repr(float(self.bin_edges[k + 1])),
                                 repr(float(self.good_density[k])),
                                 repr(float(self.defect_density[k]))])


def histogram_report(good_scores, defect_scores, bins: int = 50) -> HistogramReport:
    """Density histograms of both classes plus the three-sigma-rule threshold."""
    good = np.asarray(good_scores, dtype=float).ravel()
    defect = np.asarray(defect_scores, dtype=float).ravel()
    if good.size == 0:
        raise ValueError("good scores must be non-empty")
    mean = float(good.mean())
    std = float(good.std())  # population
    combined = np.concatenate([good, defect]) if defect.size else good
    lo, hi = float(combined.min()), float(combined.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    good_density, _ = np.histogram(good, bins=edges, density=True)
    if defect.size:
        defect_density, _ = np.histogram(defect, bins=edges, density=True)
    else:
        defect_density = np.zeros(bins)
    return HistogramReport(bin_edges=edges, good_density=good_density,
                           defect_density=defect_density,
                           threshold=mean + 3.0 * std, good_mean=mean, good_std=std)


def render_histogram(report: HistogramReport, path, title: str = "") -> None:
    """PNG plot of the two densities with the three-sigma threshold marked."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
    width = report.bin_edges[1] - report.bin_edges[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, report.good_density, width=width, alpha=0.6, label="good")
    ax.bar(centers, report.defect_density, width=width, alpha=0.6, label="defective")
    ax.axvline(report.threshold, color="k", linestyle="--", label="3-sigma threshold")
    ax.set_xlabel("score")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Raw vs standardized comparison report
# ---------------------------------------------------------------------------

@dataclass
class CategoryResult:
    category: str
    detection: dict[str, float] = field(default_factory=dict)
    localization: dict[str, float] = field(default_factory=dict)


@dataclass
class EvalReport:
    """Per-category raw/standardized AUROC columns with their differences."""

    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        cols = ["category", "task", "energy", "raw", "standardized", "difference"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row.get(c, "") for c in cols})


def compare_raw_std(results: list[CategoryResult]) -> EvalReport:
    """Tabulate raw, standardized, and difference columns per category/task."""
    report = EvalReport()
    for res in results:
        for task, aurocs in (("detection", res.detection), ("localization", res.localization)):
            if not aurocs:
                continue
            missing = {"raw", "standardized"} - set(aurocs)
            if missing:
                raise ValueError(
                    f"{res.category}/{task}: missing score kind(s) {sorted(missing)}")
            _check_auroc_range(res.category, aurocs)
            row = {
                "category": res.category,
                "task": task,
                "raw": aurocs["raw"],
                "standardized": aurocs["standardized"],
                "difference": aurocs["standardized"] - aurocs["raw"],
            }
            if "energy" in aurocs:
                row["energy"] = aurocs["energy"]
            report.rows.append(row)
    return report


def _check_auroc_range(category: str, aurocs: dict[str, float]) -> None:
    for kind, value in aurocs.items():
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{category}: AUROC {kind}={value} outside [0, 1]")
