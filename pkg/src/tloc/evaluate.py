"""Great-circle evaluation: per-sample prediction records, a_r threshold
accuracy, crop-averaged inference, classification/geolocational correlation,
and report emission."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cells import CellIndex, class_to_gps
from .geom import GeoCoord, gcd_km
from .model import DualBranchModel

PAPER_THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)
THRESHOLD_NAMES = ("street", "city", "region", "country", "continent")


class EvalError(ValueError):
    pass


@dataclass
class EvalRecord:
    gt: GeoCoord
    pred_cell: int
    pred_gps: GeoCoord
    distance_km: float
    scene_pred: int
    scene_gt: int


@dataclass
class AccuracyReport:
    thresholds_km: list[float]
    accuracy: list[float]
    n: int


def geolocational_accuracy(records: list[EvalRecord], r_km: float) -> float:
    """Fraction of records with distance strictly below r_km."""
    if not records:
        raise EvalError("empty record set")
    return sum(1 for rec in records if rec.distance_km < r_km) / len(records)


def accuracy_report(records: list[EvalRecord], thresholds_km) -> AccuracyReport:
    thresholds = sorted(float(t) for t in thresholds_km)
    return AccuracyReport(
        thresholds,
        [geolocational_accuracy(records, t) for t in thresholds],
        len(records),
    )


# crop-averaged inference ---------------------------------------------------


def _bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    """[ch, h, w] -> [ch, size, size]."""
    ch, h, w = img.shape
    ys = np.linspace(0.0, h - 1.0, size)
    xs = np.linspace(0.0, w - 1.0, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x1]
    c = img[:, y1][:, :, x0]
    d = img[:, y1][:, :, x1]
    return a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx


def _nearest_resize_seg(seg: np.ndarray, size: int) -> np.ndarray:
    h, w = seg.shape
    ys = np.clip(np.round(np.linspace(0.0, h - 1.0, size)).astype(int), 0, h - 1)
    xs = np.clip(np.round(np.linspace(0.0, w - 1.0, size)).astype(int), 0, w - 1)
    return seg[ys][:, xs]


def ten_crops(rgb: np.ndarray, seg: np.ndarray | None):
    """Center, four corners, and their horizontal flips, resized back to H.

    Crop side is ceil(0.875 * H); RGB is resized bilinearly, the class-id
    segmentation map by nearest neighbor so ids stay integral. Both branches
    always see the same spatial crop.
    """
    _, h, w = rgb.shape
    cs = int(np.ceil(0.875 * h))
    offsets = [
        ((h - cs) // 2, (w - cs) // 2),
        (0, 0), (0, w - cs), (h - cs, 0), (h - cs, w - cs),
    ]
    out = []
    for oy, ox in offsets:
        crop_rgb = _bilinear_resize(rgb[:, oy:oy + cs, ox:ox + cs].astype(np.float64), h)
        crop_seg = _nearest_resize_seg(seg[oy:oy + cs, ox:ox + cs], h) if seg is not None else None
        for flip in (False, True):
            r = crop_rgb[:, :, ::-1] if flip else crop_rgb
            s = None if crop_seg is None else (crop_seg[:, ::-1] if flip else crop_seg)
            out.append((
                np.ascontiguousarray(r).astype(np.float32),
                None if s is None else np.ascontiguousarray(s),
            ))
    return out


def predict_logits(model: DualBranchModel, rgb: np.ndarray, seg: np.ndarray | None,
                   crop_policy: str = "single") -> dict[str, np.ndarray]:
    """Forward one sample, optionally averaging logits over the ten-crop set."""
    with ad.no_grad():
        if crop_policy == "single":
            logits = model.forward(rgb[None], seg[None] if seg is not None else None)
            return {k: v.data[0] for k, v in logits.items()}
        if crop_policy != "tencrop":
            raise EvalError(f"unknown crop policy {crop_policy!r}")
        acc: dict[str, np.ndarray] = {}
        crops = ten_crops(rgb, seg)
        for crop_rgb, crop_seg in crops:
            logits = model.forward(
                crop_rgb[None], crop_seg[None] if crop_seg is not None else None
            )
            for k, v in logits.items():
                acc[k] = acc.get(k, 0.0) + v.data[0]
        return {k: v / len(crops) for k, v in acc.items()}


def predict(model: DualBranchModel, rgb: np.ndarray, seg: np.ndarray | None,
            gt: GeoCoord, scene_gt: int, index: CellIndex,
            crop_policy: str = "single") -> EvalRecord:
    if model.cfg.k_fine != index.fine.n_cells:
        raise EvalError(
            f"model fine head ({model.cfg.k_fine}) does not match "
            f"index ({index.fine.n_cells} cells)"
        )
    logits = predict_logits(model, rgb, seg if model.cfg.dual else None, crop_policy)
    pred_cell = int(logits["fine"].argmax())
    pred_gps = class_to_gps(index, "fine", pred_cell)
    scene_pred = int(logits["scene"].argmax()) if "scene" in logits else -1
    return EvalRecord(gt, pred_cell, pred_gps, gcd_km(pred_gps, gt), scene_pred, scene_gt)


def evaluate_dataset(model: DualBranchModel, ds, index: CellIndex,
                     crop_policy: str = "single") -> list[EvalRecord]:
    records = []
    for i in range(len(ds)):
        gt = GeoCoord(float(ds.lat[i]), float(ds.lon[i]))
        records.append(
            predict(model, ds.rgb[i], ds.seg[i], gt, int(ds.scene[i]), index, crop_policy)
        )
    return records


# correlation study ---------------------------------------------------------


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise EvalError("pearson needs two equal-length series of length >= 2")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise EvalError("degenerate series")
    return float((dx * dy).sum() / (sx * sy))


def topn_accuracy(fine_logits: np.ndarray, fine_labels: np.ndarray, n: int) -> float:
    order = np.argsort(-fine_logits, axis=1)[:, :n]
    return float((order == fine_labels[:, None]).any(axis=1).mean())


def correlation_study(model: DualBranchModel, ds, index: CellIndex,
                      fine_labels: np.ndarray, n_points: int = 8):
    """Top-N classification series vs a_r series and their Pearson r.

    N values are spread over [1, K]; r values over [20 m, half circumference]
    so both series have variance on a desk-scale world.
    """
    k = index.fine.n_cells
    n_values = sorted(set(int(v) for v in np.round(np.geomspace(1, k, n_points))))
    r_values = list(np.geomspace(0.02, 20000.0, n_points))

    logits = []
    with ad.no_grad():
        for start in range(0, len(ds), 64):
            sl = slice(start, start + 64)
            out = model.forward(ds.rgb[sl], ds.seg[sl] if model.cfg.dual else None)
            logits.append(out["fine"].data)
    fine_logits = np.concatenate(logits, axis=0)

    valid = fine_labels >= 0
    topn = [topn_accuracy(fine_logits[valid], fine_labels[valid], n) for n in n_values]

    records = evaluate_dataset(model, ds, index)
    ar = [geolocational_accuracy(records, r) for r in r_values]

    m = min(len(topn), len(ar))
    r = pearson(topn[:m], ar[:m])
    return {"top_n": n_values, "top_n_acc": topn, "r_km": r_values, "a_r": ar, "pearson": r}


# report emission -----------------------------------------------------------


def emit_report(report: AccuracyReport, csv_path: str, summary_path: str | None = None) -> None:
    lines = ["threshold_km,accuracy"]
    for t, a in zip(report.thresholds_km, report.accuracy):
        lines.append(f"{t:.10g},{a:.10g}")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if summary_path:
        named = dict(zip(PAPER_THRESHOLDS_KM, THRESHOLD_NAMES))
        rows = [f"samples: {report.n}"]
        for t, a in zip(report.thresholds_km, report.accuracy):
            label = named.get(t, "")
            rows.append(f"a_{t:g} km {('(' + label + ')').ljust(12) if label else '':<12} {100*a:6.2f}%")
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")


def write_pgm(mat: np.ndarray, path: str) -> None:
    """Attention heatmap as a portable graymap (P2)."""
    lo, hi = float(mat.min()), float(mat.max())
    scaled = np.zeros_like(mat) if hi <= lo else (mat - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(int)
    h, w = pix.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
