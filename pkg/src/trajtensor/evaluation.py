"""Prediction error on held-out entries and trajectory recovery error."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .engine import PosteriorModel, factor_trajectory, predict_entry, process_batch
from .errors import EmptyTestSet, IncompatibleRank


@dataclass
class CurvePoint:
    processed: int
    rmse: float
    mae: float


@dataclass
class ErrorReport:
    rmse: float
    mae: float
    n: int
    curve: list = field(default_factory=list)

    def to_dict(self):
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "n": self.n,
            "curve": [{"processed": c.processed, "rmse": c.rmse, "mae": c.mae} for c in self.curve],
        }


def errors(y_true, y_pred):
    """``(rmse, mae)`` of two equal-length sequences."""
    r = np.asarray(y_pred, float) - np.asarray(y_true, float)
    if r.size == 0:
        raise EmptyTestSet("no entries to score")
    return float(np.sqrt(np.mean(r * r))), float(np.mean(np.abs(r)))


def predict_stream(model: PosteriorModel, stream, smoothed=None):
    return np.array([predict_entry(model, e.idx, e.t, smoothed)[0] for e in stream])


def score(model: PosteriorModel, test_stream, smoothed=None) -> ErrorReport:
    """RMSE and MAE of predictive means over a test stream."""
    if len(test_stream) == 0:
        raise EmptyTestSet("test set is empty")
    ys = [e.y for e in test_stream]
    rmse, mae = errors(ys, predict_stream(model, test_stream, smoothed))
    return ErrorReport(rmse, mae, len(ys))


def online_score(model: PosteriorModel, train_stream, test_stream, checkpoint_every: int) -> ErrorReport:
    """Stream the training batches and score the test set every ``checkpoint_every`` batches.

    Mid-stream scores use running (unsmoothed) estimates. The returned
    report carries the curve; its headline numbers are the last curve point.
    """
    if checkpoint_every < 1:
        raise ValueError("checkpoint_every must be at least 1")
    if len(test_stream) == 0:
        raise EmptyTestSet("test set is empty")
    curve = []
    processed = 0
    for k, batch in enumerate(train_stream.batches(), start=1):
        process_batch(model, batch)
        processed += len(batch.entries)
        if k % checkpoint_every == 0:
            rep = score(model, test_stream, smoothed=False)
            curve.append(CurvePoint(processed, rep.rmse, rep.mae))
    if not curve:
        raise EmptyTestSet("no checkpoint was reached")
    last = curve[-1]
    return ErrorReport(last.rmse, last.mae, len(test_stream), curve)


def _sign_patterns(R, M):
    """Per-mode sign vectors whose product over modes is +1 for every factor."""
    for free in itertools.product((1.0, -1.0), repeat=R * (M - 1)):
        s = np.ones((M, R))
        s[1:] = np.reshape(free, (M - 1, R))
        s[0] = np.prod(s[1:], axis=0)
        yield s


def trajectory_rmse(model: PosteriorModel, truth: dict, n_points=500, seed=0, smoothed=True):
    """Per-trajectory RMSE against ground-truth functions after alignment.

    ``truth`` maps ``(mode, object)`` to a function of ``t`` returning
    ``(len(t),)`` or ``(len(t), R)`` values. CP factors are identifiable
    only up to a shared permutation of the rank components and sign flips
    whose product across modes is +1; the alignment minimizing the total
    squared error is used.

    Returns
    -------
    dict
        ``(mode, object, r) -> rmse`` with ``r`` 1-based.
    """
    if model.form != "cp":
        raise IncompatibleRank("trajectory alignment is defined for the CP form")
    R = model.ranks[0]
    M = model.n_modes
    ts = np.random.default_rng(seed).uniform(0.0, 1.0, n_points)
    keys = sorted(truth)
    true_vals, est = {}, {}
    for key in keys:
        v = np.asarray(truth[key](ts), float)
        v = v.reshape(len(ts), -1)
        if v.shape[1] != R:
            raise IncompatibleRank(f"truth for {key} has {v.shape[1]} components, model rank is {R}")
        true_vals[key] = v
        est[key] = factor_trajectory(model, key[0], key[1], ts, smoothed)[0]
    if R > 4:
        raise IncompatibleRank("exhaustive alignment supports rank up to 4")
    best, best_err = None, np.inf
    for perm in itertools.permutations(range(R)):
        for signs in _sign_patterns(R, M):
            err = 0.0
            for key in keys:
                d = est[key][:, perm] * signs[key[0] - 1] - true_vals[key]
                err += float((d * d).sum())
            if err < best_err:
                best, best_err = (perm, signs), err
    perm, signs = best
    out = {}
    for key in keys:
        d = est[key][:, perm] * signs[key[0] - 1] - true_vals[key]
        for r in range(R):
            out[(key[0], key[1], r + 1)] = float(np.sqrt(np.mean(d[:, r] ** 2)))
    return out


def write_report(report: ErrorReport | None, path, extra=None) -> None:
    """Write a JSON report; ``report=None`` records an empty test section."""
    data = report.to_dict() if report is not None else {"rmse": None, "mae": None, "n": 0, "curve": []}
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def write_curve_csv(report: ErrorReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["processed", "rmse", "mae"])
        for c in report.curve:
            w.writerow([c.processed, repr(c.rmse), repr(c.mae)])
