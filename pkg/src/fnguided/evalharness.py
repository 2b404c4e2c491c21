"""Classification and pose metrics, and the method comparison runner.

A pair's pose error is the larger of its rotation and translation angular
errors; a pair whose estimation fails scores 180 degrees. ``mAP@t`` is the
mean, in percent, of the accuracies at 5, 10, ..., t degrees.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from . import guidedloss as gl

FAIL_ERROR_DEG = 180.0
MAP_STEP_DEG = 5
RANSAC_THRESHOLD = 1e-3
RANSAC_ITERATIONS = 2000
POSTS = ("weighted8pt", "ransac")
BASELINE_METHODS = ("ransac_only", "oracle")


class EvalError(ValueError):
    pass


def compute_classification_metrics(probabilities, labels):
    """``(P, R, F1, F2)`` of the threshold-0.5 predictions."""
    lab = np.asarray(labels, dtype=bool).reshape(-1)
    n_pos = int(lab.sum())
    if n_pos == 0 or n_pos == lab.size:
        raise EvalError("classification metrics need both classes")
    state = gl.confusion_from_logits(probabilities, lab)
    p, r = gl.precision_recall(state)
    return p, r, gl.fn_from_pr(p, r, 1.0), gl.fn_from_pr(p, r, 2.0)


def map_at_threshold(errors, max_threshold):
    """Mean accuracy (percent) over thresholds 5, 10, ..., ``max_threshold``."""
    errs = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errs.size == 0:
        raise EvalError("empty error list")
    if max_threshold < MAP_STEP_DEG or max_threshold % MAP_STEP_DEG:
        raise EvalError(f"threshold must be a positive multiple of {MAP_STEP_DEG}, got {max_threshold}")
    errs = np.where(np.isnan(errs), FAIL_ERROR_DEG, errs)
    thresholds = np.arange(MAP_STEP_DEG, max_threshold + 1, MAP_STEP_DEG)
    acc = [(errs <= t).mean() for t in thresholds]
    return 100.0 * float(np.mean(acc))


def pose_error(E, gt_pose, corrs):
    """``max(rotation, translation)`` error in degrees; 180 on failure."""
    if E is None or len(corrs) == 0:
        return FAIL_ERROR_DEG, FAIL_ERROR_DEG, FAIL_ERROR_DEG
    try:
        r, t = geometry.recover_pose_and_angular_errors(E, gt_pose, corrs)
    except (geometry.GeometryError, ValueError, np.linalg.LinAlgError):
        return FAIL_ERROR_DEG, FAIL_ERROR_DEG, FAIL_ERROR_DEG
    return r, t, max(r, t)


def estimate_essential(corrs, probs, weights, post, seed):
    """Run one post-processing mode; returns ``(E or None, support mask)``."""
    if post == "weighted8pt":
        support = weights > 0
        try:
            return geometry.weighted_eight_point(corrs, weights), support
        except (geometry.GeometryError, ValueError):
            return None, support
    if post == "ransac":
        keep = probs > gl.THRESHOLD
        if keep.sum() < 8:
            return None, keep
        try:
            E, mask = geometry.ransac_essential(corrs[keep], RANSAC_ITERATIONS, RANSAC_THRESHOLD, seed)
        except (geometry.GeometryError, ValueError):
            return None, keep
        support = np.zeros(len(corrs), dtype=bool)
        support[np.flatnonzero(keep)[mask]] = True
        return E, support
    raise EvalError(f"unknown post-processing {post!r}")


@dataclass
class MethodResult:
    method: str
    post: str
    per_pair: list = field(default_factory=list)

    def aggregates(self):
        errs = [r["error"] for r in self.per_pair]
        return {
            "method": self.method,
            "post": self.post,
            "map5": map_at_threshold(errs, 5),
            "map10": map_at_threshold(errs, 10),
            "map20": map_at_threshold(errs, 20),
            "mean_p": float(np.mean([r["precision"] for r in self.per_pair])),
            "mean_r": float(np.mean([r["recall"] for r in self.per_pair])),
            "mean_f2": float(np.mean([r["f2"] for r in self.per_pair])),
        }

    def to_dict(self):
        d = self.aggregates()
        d["per_pair"] = self.per_pair
        return d


def _pair_record(pair, probs, E, support):
    P, R, F1, F2 = compute_classification_metrics(probs, pair.labels)
    corrs = pair.correspondences[support] if support.any() else pair.correspondences
    rot, trans, err = pose_error(E, pair.gt_pose, corrs)
    return {"precision": P, "recall": R, "f1": F1, "f2": F2,
            "rot_err": rot, "trans_err": trans, "error": err}


def predict(model, pairs, prior_model, batch_size=16):
    """Final-stage probabilities and eight-point weights for every pair."""
    from . import cascade as cc
    from . import prior as pr

    probs, weights = [None] * len(pairs), [None] * len(pairs)
    by_n = {}
    for i, p in enumerate(pairs):
        by_n.setdefault(p.n, []).append(i)
    for idx in by_n.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            coords = np.stack([pairs[i].correspondences for i in chunk])
            prior = np.stack([pr.pair_posteriors(pairs[i].lowe_ratios, prior_model)[0] for i in chunk])
            out = cc.forward_cascade(model, coords, prior, training=False)
            L = out.stage_logits[-1].value
            for j, i in enumerate(chunk):
                probs[i] = 0.5 + 0.5 * np.tanh(0.5 * L[j])
                weights[i] = np.tanh(np.maximum(L[j], 0.0))
    return probs, weights


def evaluate_method(method, pairs, posts, probs=None, weights=None, seed=0):
    """Score one method under each post-processing mode.

    ``ransac_only`` runs RANSAC on all correspondences whatever the post
    mode; ``oracle`` uses the ground-truth labels as its predictions.
    """
    from .synthgen import pair_seed

    results = [MethodResult(method, post) for post in posts]
    for i, pair in enumerate(pairs):
        s = pair_seed(seed, i)
        if method == "ransac_only":
            try:
                E, mask = geometry.ransac_essential(pair.correspondences, RANSAC_ITERATIONS,
                                                    RANSAC_THRESHOLD, s)
            except (geometry.GeometryError, ValueError):
                E, mask = None, np.zeros(pair.n, dtype=bool)
            rec = _pair_record(pair, mask.astype(np.float64), E, mask)
            for res in results:
                res.per_pair.append(dict(rec))
            continue
        if method == "oracle":
            p = pair.labels.astype(np.float64)
            w = p
        else:
            p, w = probs[i], weights[i]
        for res in results:
            E, support = estimate_essential(pair.correspondences, p, w, res.post, s)
            res.per_pair.append(_pair_record(pair, p, E, support))
    return results


def run_comparison(pairs, methods, posts=POSTS, prior_model=None, seed=0):
    """Evaluate every ``(method, post)`` combination.

    ``methods`` maps a method name to a checkpoint path (or a loaded model);
    ``ransac_only`` and ``oracle`` need no checkpoint.
    """
    from . import cascade as cc

    for post in posts:
        if post not in POSTS:
            raise EvalError(f"unknown post-processing {post!r}")
    rows = []
    for name, source in methods.items():
        if name in BASELINE_METHODS and source is None:
            rows.extend(evaluate_method(name, pairs, posts, seed=seed))
            continue
        if source is None:
            raise EvalError(f"method {name!r} needs a checkpoint")
        if prior_model is None:
            raise EvalError("learned methods need a prior model")
        model = source
        if not isinstance(source, cc.CascadeModel):
            model = cc.load_checkpoint(source)[0]
        probs, weights = predict(model, pairs, prior_model)
        rows.extend(evaluate_method(name, pairs, posts, probs, weights, seed))
    return rows


CSV_FIELDS = ("method", "post", "map5", "map10", "map20", "mean_p", "mean_r", "mean_f2")


def report_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        agg = row.aggregates()
        writer.writerow({k: (f"{agg[k]:.6f}" if isinstance(agg[k], float) else agg[k])
                         for k in CSV_FIELDS})
    return buf.getvalue()


def write_report(rows, path):
    """Write ``<path>.json`` and ``<path>.csv``; returns both paths."""
    base = Path(path)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    jpath, cpath = base.with_suffix(".json"), base.with_suffix(".csv")
    jpath.write_text(json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True))
    cpath.write_text(report_csv(rows))
    return str(jpath), str(cpath)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_data(records):
    """Validation rows ``(iteration, precision, recall, f2, lambda_final)`` from a log."""
    out = []
    for rec in records:
        if rec.get("val_precision") is None:
            continue
        out.append((rec["iteration"], rec["val_precision"], rec["val_recall"],
                    rec["val_f2"], rec.get("lambda_stage3")))
    return out


def write_plot_data(records, path):
    """CSV of the validation curves plus the per-iteration lambda trajectory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "val_precision", "val_recall", "val_f2", "lambda_final"])
        for row in plot_data(records):
            w.writerow(row)
    lam_path = path.with_name(path.stem + "_lambda.csv")
    with open(lam_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "lambda_stage1", "lambda_stage2", "lambda_stage3"])
        for rec in records:
            w.writerow([rec["iteration"]] + [rec.get(f"lambda_stage{s}") for s in (1, 2, 3)])
    return str(path), str(lam_path)


def mean_over_seeds(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")
