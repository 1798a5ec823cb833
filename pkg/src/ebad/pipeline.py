"""End-to-end pipeline steps behind the CLI commands.

Each step reads/writes the documented artifact files:

    train     -> checkpoint.ebm, history.csv
    fit-stats -> stats.ebs
    score     -> image_scores.csv, maps/*.npy, png16/*.png(+.json),
                 heatmaps/*.png(+.json), meta.json
    eval      -> detection_auroc.csv, localization_auroc.csv, roc_*.csv,
                 histogram_*.csv/.png, summary.json
    report    -> comparison.csv, reference_detection.csv, reference_localization.csv
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .checkpoint import atomic_save_checkpoint, load_checkpoint
from .config import RunConfig
from .data import (
    HeatmapRender,
    emit_heatmap,
    generate_synthetic,
    load_mask,
    load_mvtec,
    load_split_images,
    preprocess,
    save_score_map_png16,
)
from .errors import EbadError, ShapeMismatchError
from .evaluation import (
    REFERENCE_DETECTION_AVERAGE,
    REFERENCE_LOCALIZATION,
    CategoryResult,
    LabeledScores,
    auroc,
    compare_raw_std,
    histogram_report,
    render_histogram,
    roc_curve,
)
from .network import ModelParams
from .scoring import (
    energy_score,
    fit_pixel_stats,
    gradient_map,
    image_score,
    iter_gradient_maps,
    load_pixel_stats,
    pixel_scores,
    save_pixel_stats,
    standardize,
)
from .training import fit

SCORE_KINDS_IMAGE = ("energy", "raw", "standardized")


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def entry_id(entry) -> str:
    return f"{entry.label}/{entry.image_path.stem}"


def _file_stem(entry) -> str:
    return f"{entry.label}_{entry.image_path.stem}"


def run_synth(config: RunConfig, out_dir) -> Path:
    if config.synth is None:
        raise EbadError("config has no synth section")
    return generate_synthetic(config.synth, _ensure_dir(out_dir))


def run_train(config: RunConfig, out_dir, log=None) -> tuple[Path, Path]:
    out_dir = _ensure_dir(out_dir)
    manifest = load_mvtec(config.data.root, config.data.category, "train",
                          channels=config.data.channels)
    images = load_split_images(manifest, config.data.image_size)
    params, history = fit(images, config.topology(), config.trainer,
                          checkpoint_dir=out_dir, log=log)
    checkpoint_path = out_dir / "checkpoint.ebm"
    atomic_save_checkpoint(checkpoint_path, params)
    history_path = out_dir / "history.csv"
    history.to_csv(history_path)
    return checkpoint_path, history_path


def _check_model_matches_data(params: ModelParams, config: RunConfig) -> tuple[int, int, int]:
    model_shape = params.topology.input_shape
    want = (config.data.image_size, config.data.image_size, config.data.channels)
    if model_shape != want:
        raise ShapeMismatchError(
            f"checkpoint expects input {model_shape} but data config asks for {want}")
    return model_shape


def run_fit_stats(config: RunConfig, checkpoint_path, out_dir,
                  batch_size: int = 16) -> Path:
    out_dir = _ensure_dir(out_dir)
    params = load_checkpoint(checkpoint_path)
    _check_model_matches_data(params, config)
    manifest = load_mvtec(config.data.root, config.data.category, "train",
                          channels=config.data.channels)
    images = load_split_images(manifest, config.data.image_size)
    stats = fit_pixel_stats(
        iter_gradient_maps(params, images, batch_size=batch_size),
        epsilon=config.scoring.sigma_floor)
    stats_path = out_dir / "stats.ebs"
    save_pixel_stats(stats_path, stats)
    return stats_path


def run_score(config: RunConfig, checkpoint_path, stats_path, out_dir,
              workers: int = 1) -> Path:
    out_dir = _ensure_dir(out_dir)
    params = load_checkpoint(checkpoint_path)
    model_shape = _check_model_matches_data(params, config)
    stats = load_pixel_stats(stats_path)
    if stats.mu.shape != model_shape:
        raise ShapeMismatchError(
            f"stats shape {stats.mu.shape} does not match model input {model_shape}")
    manifest = load_mvtec(config.data.root, config.data.category, "test",
                          channels=config.data.channels)
    maps_dir = _ensure_dir(out_dir / "maps")
    png_dir = _ensure_dir(out_dir / "png16")
    heat_dir = _ensure_dir(out_dir / "heatmaps")
    r = config.scoring.r
    overlay = HeatmapRender(overlay_alpha=0.6)

    def score_one(entry):
        # one entry per task; each task writes only its own files
        image = preprocess(entry.image_path, manifest.channels, config.data.image_size)
        gmap = gradient_map(params, image, image_id=entry_id(entry))
        smap_raw = pixel_scores(gmap, r=r)
        std_map = standardize(gmap, stats)
        smap_std = pixel_scores(std_map, r=r)
        stem = _file_stem(entry)
        np.save(maps_dir / f"{stem}_raw.npy", smap_raw.values)
        np.save(maps_dir / f"{stem}_std.npy", smap_std.values)
        save_score_map_png16(png_dir / f"{stem}_std.png", smap_std.values)
        emit_heatmap(smap_std.values, overlay, heat_dir / f"{stem}.png", base_image=image)
        return {
            "id": entry_id(entry),
            "label": entry.label,
            "anomalous": 1 if entry.is_defective else 0,
            "energy": energy_score(params, image).value,
            "raw": image_score(gmap, r=r).value,
            "standardized": image_score(std_map, r=r).value,
        }

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score_one, manifest.entries))
    else:
        rows = [score_one(entry) for entry in manifest.entries]

    with open(out_dir / "image_scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "label", "anomalous",
                                                "energy", "raw", "standardized"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "energy": repr(row["energy"]),
                             "raw": repr(row["raw"]),
                             "standardized": repr(row["standardized"])})
    meta = {
        "category": manifest.category,
        "r": r,
        "image_size": config.data.image_size,
        "channels": config.data.channels,
        "n_images": len(manifest),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return out_dir


def _read_image_scores(scores_dir: Path):
    rows = []
    with open(scores_dir / "image_scores.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "id": row["id"],
                "label": row["label"],
                "anomalous": int(row["anomalous"]),
                "energy": float(row["energy"]),
                "raw": float(row["raw"]),
                "standardized": float(row["standardized"]),
            })
    return rows


def run_eval(config: RunConfig, scores_dir, out_dir) -> dict:
    scores_dir = Path(scores_dir)
    out_dir = _ensure_dir(out_dir)
    meta = json.loads((scores_dir / "meta.json").read_text())
    size = meta["image_size"]
    rows = _read_image_scores(scores_dir)
    labels = np.array([r["anomalous"] for r in rows], dtype=np.int8)

    detection = {}
    for kind in SCORE_KINDS_IMAGE:
        data = LabeledScores(np.array([r[kind] for r in rows]), labels)
        detection[kind] = auroc(data)
        roc_curve(data).to_csv(out_dir / f"roc_image_{kind}.csv")

    manifest = load_mvtec(config.data.root, config.data.category, "test",
                          channels=config.data.channels)
    by_id = {entry_id(e): e for e in manifest.entries}
    localization = {}
    pixel_values = {}
    masks = []
    for row in rows:
        entry = by_id.get(row["id"])
        if entry is None:
            raise EbadError(f"scored image {row['id']} not present in manifest")
        if entry.mask_path is not None:
            masks.append(load_mask(entry.mask_path, size=size))
        else:
            masks.append(np.zeros((size, size), dtype=np.int8))
    for kind, suffix in (("raw", "raw"), ("standardized", "std")):
        maps = [np.load(scores_dir / "maps" / f"{r['label']}_{Path(r['id']).name}_{suffix}.npy")
                for r in rows]
        flat_scores = np.concatenate([m.ravel() for m in maps])
        flat_labels = np.concatenate([m.ravel() for m in masks]).astype(np.int8)
        data = LabeledScores(flat_scores, flat_labels)
        localization[kind] = auroc(data)
        roc_curve(data).to_csv(out_dir / f"roc_pixel_{kind}.csv")
        pixel_values[kind] = (flat_scores, flat_labels)

    bins = config.evaluation.histogram_bins
    histograms = {}
    for kind in ("raw", "standardized"):
        flat_scores, flat_labels = pixel_values[kind]
        rep = histogram_report(flat_scores[flat_labels == 0],
                               flat_scores[flat_labels == 1], bins=bins)
        rep.to_csv(out_dir / f"histogram_pixel_{kind}.csv")
        render_histogram(rep, out_dir / f"histogram_pixel_{kind}.png",
                         title=f"pixel scores ({kind})")
        histograms[f"pixel_{kind}"] = _histogram_summary(rep)
    image_std = np.array([r["standardized"] for r in rows])
    rep = histogram_report(image_std[labels == 0], image_std[labels == 1], bins=bins)
    rep.to_csv(out_dir / "histogram_image_standardized.csv")
    render_histogram(rep, out_dir / "histogram_image_standardized.png",
                     title="image scores (standardized)")
    histograms["image_standardized"] = _histogram_summary(rep)

    _write_auroc_csv(out_dir / "detection_auroc.csv", detection)
    _write_auroc_csv(out_dir / "localization_auroc.csv", localization)
    summary = {"category": meta["category"], "detection": detection,
               "localization": localization, "histograms": histograms}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _histogram_summary(rep) -> dict:
    return {"threshold": rep.threshold, "good_mean": rep.good_mean,
            "good_std": rep.good_std}


def _write_auroc_csv(path, aurocs: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "auroc"])
        for kind, value in aurocs.items():
            writer.writerow([kind, repr(float(value))])


def run_report(eval_dirs, out_dir) -> Path:
    out_dir = _ensure_dir(out_dir)
    results = []
    for eval_dir in eval_dirs:
        summary_path = Path(eval_dir) / "summary.json"
        if not summary_path.is_file():
            raise EbadError(f"no summary.json under {eval_dir}")
        summary = json.loads(summary_path.read_text())
        results.append(CategoryResult(summary["category"],
                                      detection=summary.get("detection", {}),
                                      localization=summary.get("localization", {})))
    report = compare_raw_std(results)
    report_path = out_dir / "comparison.csv"
    report.to_csv(report_path)

    with open(out_dir / "reference_detection.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "auroc"])
        for kind, value in REFERENCE_DETECTION_AVERAGE.items():
            writer.writerow([kind, value])
    with open(out_dir / "reference_localization.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "raw", "standardized", "difference"])
        for category, (raw, std) in REFERENCE_LOCALIZATION.items():
            writer.writerow([category, raw, std, round(std - raw, 2)])
    return report_path
