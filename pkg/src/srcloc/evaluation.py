"""Thresholding, confusion metrics, model evaluation and source-centrality summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, sample_posterior
from .graph import Graph, closeness_centrality

METRIC_FIELDS = ("sample_id", "tp", "fp", "fn", "tn", "precision", "recall", "f1")
TAU_GRID = tuple(round(0.02 * i, 2) for i in range(1, 31))


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MetricReport:
    """Macro-averaged precision/recall/F1 plus the per-sample rows behind them."""

    f1: float
    recall: float
    precision: float
    tp: int
    fp: int
    fn: int
    tn: int
    rows: list[tuple[int, Confusion]] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: list[tuple[int, Confusion]]) -> "MetricReport":
        if not rows:
            raise ValueError("no samples to report on")
        cs = [c for _, c in rows]
        return cls(
            f1=float(np.mean([c.f1 for c in cs])),
            recall=float(np.mean([c.recall for c in cs])),
            precision=float(np.mean([c.precision for c in cs])),
            tp=sum(c.tp for c in cs),
            fp=sum(c.fp for c in cs),
            fn=sum(c.fn for c in cs),
            tn=sum(c.tn for c in cs),
            rows=list(rows),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for sid, c in self.rows:
            w.writerow([sid, c.tp, c.fp, c.fn, c.tn, f"{c.precision:.6f}", f"{c.recall:.6f}", f"{c.f1:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "f1": round(self.f1, 6),
            "recall": round(self.recall, 6),
            "precision": round(self.precision, 6),
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "samples": len(self.rows),
        }


def binarize(x_hat, rule: str = "threshold", tau: float = 0.5, k: int | None = None) -> np.ndarray:
    """1 where x_hat >= tau, or the k largest entries (ties to the lowest id)."""
    x = np.asarray(x_hat, dtype=np.float64)
    out = np.zeros(len(x), dtype=np.uint8)
    if rule == "threshold":
        out[x >= tau] = 1
    elif rule == "top-k":
        if k is None or not 0 <= k <= len(x):
            raise ValueError(f"top-k needs 0 <= k <= {len(x)}")
        order = np.lexsort((np.arange(len(x)), -x))
        out[order[:k]] = 1
    else:
        raise ValueError(f"unknown binarization rule {rule!r}")
    return out


def score(pred, truth) -> Confusion:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    return Confusion(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
    )


def score_all(preds, truths, ids=None) -> MetricReport:
    ids = range(len(preds)) if ids is None else ids
    return MetricReport.from_rows([(int(i), score(p, t)) for i, p, t in zip(ids, preds, truths)])


def decide(probs, truths, rule: str = "threshold", tau: float = 0.5) -> list[np.ndarray]:
    """Binarize each row of ``probs``; top-k keeps as many nodes as the row's truth has sources."""
    return [binarize(p, rule, tau, k=int(np.sum(t)) if rule == "top-k" else None) for p, t in zip(probs, truths)]


def calibrate_threshold(probs, truths, grid=TAU_GRID) -> tuple[float, float]:
    """The threshold in ``grid`` with the best macro-F1 on (probs, truths), and that F1.

    Meant for a validation split: the denoiser's averaged x0 estimates are
    often well ordered but compressed below 0.5, so a fixed 0.5 cut can
    discard every source. Ties go to the earliest grid value.
    """
    if len(probs) == 0:
        raise ValueError("cannot calibrate on an empty split")
    best_tau, best_f1 = float(grid[0]), -1.0
    for tau in grid:
        f1 = score_all(decide(probs, truths, "threshold", tau), truths).f1
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau, best_f1


def predict_probabilities(
    denoiser,
    x_est: np.ndarray,
    y: np.ndarray,
    sched: NoiseSchedule,
    n_samples: int = 8,
    seed: int = 0,
    chunk: int = 64,
    dtype=torch.float32,
) -> np.ndarray:
    """Posterior source probabilities for a stack of observations, (N, n) in, (N, n) out.

    Chains are run in chunks of at most ``chunk`` observations; every chunk
    gets its own generator derived from (seed, chunk index), so the output
    does not depend on anything but the inputs and ``seed``.
    """
    x_est = np.atleast_2d(x_est)
    y = np.atleast_2d(y)
    per = max(1, chunk // max(1, n_samples))
    out = []
    for c, start in enumerate(range(0, len(x_est), per)):
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, c]).generate_state(1)[0]))
        probs = sample_posterior(
            denoiser, x_est[start:start + per], y[start:start + per], sched, gen, n_samples, dtype=dtype
        )
        out.append(probs.double().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, x_est.shape[1]))


def evaluate_model(
    denoiser,
    data,
    sched: NoiseSchedule,
    n_samples: int = 8,
    rule: str = "threshold",
    tau: float = 0.5,
    seed: int = 0,
    dtype=torch.float32,
) -> MetricReport:
    """Sample, binarize and score every observation in ``data`` (a PreparedSet).

    With ``rule='top-k'`` each sample keeps as many nodes as it has true sources.
    With ``rule='calibrated'`` the threshold is the one that scores best on
    ``data`` itself (see ``calibrate_threshold``); use it for validation-time
    model selection, never on a test split.
    """
    if len(data) == 0:
        raise ValueError("empty test set")
    probs = predict_probabilities(denoiser, data.x_est, data.y, sched, n_samples, seed, dtype=dtype)
    if rule == "calibrated":
        rule, tau = "threshold", calibrate_threshold(probs, data.x0)[0]
    return score_all(decide(probs, data.x0, rule, tau), data.x0, data.ids)


def calibrated_evaluation(
    denoiser,
    val,
    test,
    sched: NoiseSchedule,
    n_samples: int = 8,
    seed: int = 0,
    dtype=torch.float32,
) -> tuple[float, MetricReport, MetricReport]:
    """Pick the threshold on ``val``, then score ``test`` with it and with the fixed 0.5 cut.

    Returns (tau, calibrated test report, tau = 0.5 test report). The test
    split never influences the threshold.
    """
    pv = predict_probabilities(denoiser, val.x_est, val.y, sched, n_samples, seed, dtype=dtype)
    tau, _ = calibrate_threshold(pv, val.x0)
    pt = predict_probabilities(denoiser, test.x_est, test.y, sched, n_samples, seed + 1, dtype=dtype)
    calibrated = score_all(decide(pt, test.x0, "threshold", tau), test.x0, test.ids)
    return tau, calibrated, score_all(decide(pt, test.x0), test.x0, test.ids)


@dataclass
class CCSummary:
    pred_mean: float
    pred_std: float
    true_mean: float
    true_std: float
    bins: np.ndarray
    pred_hist: np.ndarray
    true_hist: np.ndarray
    pred_values: np.ndarray
    true_values: np.ndarray

    def histogram_csv(self) -> str:
        lines = ["bin_lo,bin_hi,pred_count,true_count"]
        for i in range(len(self.bins) - 1):
            lines.append(f"{self.bins[i]:.4f},{self.bins[i + 1]:.4f},{self.pred_hist[i]},{self.true_hist[i]}")
        return "\n".join(lines) + "\n"


def cc_analysis(preds, truths, observations, g: Graph, bins: int = 10) -> CCSummary:
    """Closeness of predicted vs. true sources within each sample's infected subgraph.

    ``observations`` supplies the infected sets; nodes outside them (which
    only a bad prediction can produce) are scored 0. With no predicted
    sources at all the predicted mean and spread are NaN.
    """
    pred_vals, true_vals = [], []
    for pred, truth, y in zip(preds, truths, observations):
        infected = np.flatnonzero(np.asarray(y) > 0)
        cc = np.zeros(g.node_count)
        if len(infected):
            cc[infected] = closeness_centrality(g, infected)
        pred_vals.extend(cc[np.asarray(pred) > 0])
        true_vals.extend(cc[np.asarray(truth) > 0])
    if not true_vals:
        raise ValueError("closeness analysis needs at least one true source")
    pred_vals, true_vals = np.array(pred_vals, dtype=float), np.array(true_vals, dtype=float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    # an empty prediction set has no closeness statistics
    return CCSummary(
        pred_mean=float(pred_vals.mean()) if len(pred_vals) else float("nan"),
        pred_std=float(pred_vals.std()) if len(pred_vals) else float("nan"),
        true_mean=float(true_vals.mean()),
        true_std=float(true_vals.std()),
        bins=edges,
        pred_hist=np.histogram(pred_vals, edges)[0],
        true_hist=np.histogram(true_vals, edges)[0],
        pred_values=pred_vals,
        true_values=true_vals,
    )
