"""Verification: thresholded contingency counts, skill scores, MSE and variable ablation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from nowcast.constants import PRECIP_MAX_MM, THRESHOLDS_MMH, VARIABLES
from nowcast.kriging import variable_channels
from nowcast.models import forward_batch

STEPS_PER_HOUR = 12


def to_rate(normalized):
    """Normalized 5-minute depth -> mm/h, clamped at zero."""
    return np.maximum(np.asarray(normalized, dtype=np.float64) * PRECIP_MAX_MM, 0.0) * STEPS_PER_HOUR


def binarize(rate, threshold):
    """1 where the rain rate strictly exceeds ``threshold`` mm/h."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return np.asarray(rate) > threshold


@dataclass
class ContingencyCounts:
    threshold: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    n_samples: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def accumulate(self, pred_mask, target_mask, n_samples=None):
        pred_mask = np.asarray(pred_mask, dtype=bool)
        target_mask = np.asarray(target_mask, dtype=bool)
        if pred_mask.shape != target_mask.shape:
            raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {target_mask.shape}")
        self.tp += int(np.count_nonzero(pred_mask & target_mask))
        self.fp += int(np.count_nonzero(pred_mask & ~target_mask))
        self.tn += int(np.count_nonzero(~pred_mask & ~target_mask))
        self.fn += int(np.count_nonzero(~pred_mask & target_mask))
        self.n_samples += 1 if n_samples is None else n_samples
        return self

    def __add__(self, other):
        if self.threshold != other.threshold:
            raise ValueError("cannot merge counts for different thresholds")
        return ContingencyCounts(self.threshold, self.tp + other.tp, self.fp + other.fp,
                                 self.tn + other.tn, self.fn + other.fn, self.n_samples + other.n_samples)


def accumulate(pred_mask, target_mask, counts):
    return counts.accumulate(pred_mask, target_mask)


def score(counts):
    """F1, CSI, HSS and MCC from contingency counts.

    A zero denominator yields 0 and the metric name is listed under
    ``"undefined"``.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    undefined = []

    def ratio(name, num, den):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    out = {
        "f1": ratio("f1", 2 * tp, 2 * tp + fp + fn),
        "csi": ratio("csi", tp, tp + fp + fn),
        "hss": ratio("hss", 2 * (tp * tn - fp * fn), (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)),
    }
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    out["mcc"] = ratio("mcc", tp * tn - fp * fn, math.sqrt(mcc_den) if mcc_den else 0)
    out["undefined"] = undefined
    return out


@dataclass
class MetricReport:
    model: str
    dataset: str
    n_samples: int
    mse: float
    scores: dict
    counts: dict = field(default_factory=dict)

    @property
    def thresholds(self):
        return sorted(float(t) for t in self.scores)

    def to_dict(self):
        return {
            "model": self.model,
            "dataset": self.dataset,
            "n_samples": self.n_samples,
            "mse": self.mse,
            "thresholds": {
                f"{t:g}": {"scores": self.scores[t], "counts": self.counts.get(t)} for t in self.thresholds
            },
        }

    @classmethod
    def from_dict(cls, d):
        scores = {float(k): v["scores"] for k, v in d["thresholds"].items()}
        counts = {float(k): v["counts"] for k, v in d["thresholds"].items()}
        return cls(d["model"], d["dataset"], d["n_samples"], d["mse"], scores, counts)

    def table_rows(self):
        """Rows mirroring the per-threshold performance table (MSE on the first row only)."""
        rows = []
        for i, t in enumerate(self.thresholds):
            s = self.scores[t]
            rows.append({
                "threshold_mmh": f"{t:g}",
                "model": self.model,
                "mse": f"{self.mse:.6f}" if i == 0 else "-",
                "f1": f"{s['f1']:.6f}",
                "csi": f"{s['csi']:.6f}",
                "hss": f"{s['hss']:.6f}",
                "mcc": f"{s['mcc']:.6f}",
            })
        return rows


class Scorer:
    """Streaming accumulation of counts and squared error over batches."""

    def __init__(self, thresholds=THRESHOLDS_MMH):
        self.counts = {float(t): ContingencyCounts(float(t)) for t in thresholds}
        self.sq_err = 0.0
        self.n_pixels = 0
        self.n_samples = 0

    def update(self, pred, target):
        """``pred`` and ``target`` are normalized arrays shaped (B, 1, H, W)."""
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
        p_mm = np.maximum(pred * PRECIP_MAX_MM, 0.0)
        t_mm = np.maximum(target * PRECIP_MAX_MM, 0.0)
        self.sq_err += float(np.sum((p_mm - t_mm) ** 2))
        self.n_pixels += p_mm.size
        self.n_samples += pred.shape[0]
        p_rate, t_rate = p_mm * STEPS_PER_HOUR, t_mm * STEPS_PER_HOUR
        for t, c in self.counts.items():
            c.accumulate(binarize(p_rate, t), binarize(t_rate, t), n_samples=pred.shape[0])

    def report(self, model="", dataset=""):
        scores = {t: score(c) for t, c in self.counts.items()}
        counts = {t: {k: v for k, v in asdict(c).items() if k != "threshold"} for t, c in self.counts.items()}
        mse = self.sq_err / self.n_pixels if self.n_pixels else float("nan")
        return MetricReport(model, dataset, self.n_samples, mse, scores, counts)


def evaluate_predictions(preds, targets, thresholds=THRESHOLDS_MMH, model="", dataset=""):
    s = Scorer(thresholds)
    s.update(preds, targets)
    return s.report(model, dataset)


@torch.no_grad()
def predict(model, data, batch_size=16, station_mask=None, krige_mask=None):
    """Run ``model`` over a :class:`nowcast.training.ArrayData`; returns (N, 1, H, W) numpy.

    ``station_mask`` zeroes variable slices of the station tensor;
    ``krige_mask`` zeroes channels of the flattened kriging stack.
    """
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        precip, station, krige, _ = data.batch(slice(i, i + batch_size))
        if station is not None and station_mask is not None:
            station = station.clone()
            station[:, :, station_mask, :] = 0.0
        if krige is not None and krige_mask is not None:
            krige = krige.clone()
            krige[:, krige_mask] = 0.0
        out.append(forward_batch(model, precip, station, krige).float().numpy())
    return np.concatenate(out, axis=0)


def evaluate_model(model, data, thresholds=THRESHOLDS_MMH, model_name="", dataset="", batch_size=16, **masks):
    preds = predict(model, data, batch_size, **masks)
    return evaluate_predictions(preds, data.target.numpy(), thresholds, model_name, dataset)


@dataclass
class AblationResult:
    variable: str | None
    f1: float
    csi: float
    delta_f1: float | None = None
    f1_contribution: float | None = None
    delta_csi: float | None = None
    csi_contribution: float | None = None

    def row(self):
        def fmt(v, pct=False):
            if v is None:
                return "--"
            return f"{v:.2f}%" if pct else f"{v:.4f}"

        return {
            "ablated_variable": self.variable or "none",
            "f1_without": fmt(self.f1),
            "delta_f1": fmt(self.delta_f1),
            "f1_contribution": fmt(self.f1_contribution, True),
            "csi_without": fmt(self.csi),
            "delta_csi": fmt(self.delta_csi),
            "csi_contribution": fmt(self.csi_contribution, True),
        }


def contribution(full, without):
    """(absolute drop, drop as % of the full-model score)."""
    delta = full - without
    return delta, (100.0 * delta / full if full else 0.0)


def ablation_row(variable, full_f1, full_csi, f1, csi):
    d_f1, p_f1 = contribution(full_f1, f1)
    d_csi, p_csi = contribution(full_csi, csi)
    return AblationResult(variable, f1, csi, d_f1, p_f1, d_csi, p_csi)


def ablate_variables(model, data, threshold=0.5, variables=VARIABLES, batch_size=16):
    """Inference-time ablation: each variable's inputs replaced by its standardized mean (0).

    Returns the full-model row followed by one row per variable, sorted by
    decreasing F1 drop.
    """
    if not (getattr(model, "needs_station", False) or getattr(model, "needs_krige", False)):
        raise ValueError("ablation needs a model that consumes station or kriging inputs")
    unknown = [v for v in variables if v not in VARIABLES]
    if unknown:
        raise ValueError(f"unknown variable(s): {', '.join(unknown)}")
    full = evaluate_model(model, data, (threshold,), batch_size=batch_size).scores[float(threshold)]
    rows = [AblationResult(None, full["f1"], full["csi"])]
    for name in variables:
        v = VARIABLES.index(name)
        if getattr(model, "needs_station", False):
            masks = {"station_mask": v}
        else:
            masks = {"krige_mask": variable_channels(v)}
        s = evaluate_model(model, data, (threshold,), batch_size=batch_size, **masks).scores[float(threshold)]
        rows.append(ablation_row(name, full["f1"], full["csi"], s["f1"], s["csi"]))
    rows[1:] = sorted(rows[1:], key=lambda r: -r.delta_f1)
    return rows

