"""Evaluation: metrics, selection statistics, heatmaps, report files.

Everything here is a pure function of predictions, labels, and gate traces,
so recomputation is bit-identical. File writers emit plain CSV; plotting is
left to the user.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import unroll
from .tensor import _sigmoid_np


@dataclass
class EvalRun:
    """Deterministic test-time pass over a dataset, per sequence."""

    preds: list[np.ndarray]  # [T] class ids, or [T, C] binary
    gates: list[np.ndarray]  # [T, G] binary selection trace
    probs: list[np.ndarray] | None


def run_model(model, ds, *, tau: float, seed: int = 0, batch_size: int = 64) -> EvalRun:
    """Run the model with test-time gating over every sequence."""
    rng = np.random.default_rng(seed)
    n = len(ds.sequences)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(ds.sequences):
        by_len.setdefault(s.length, []).append(i)

    preds: list = [None] * n
    gates: list = [None] * n
    probs: list = [None] * n
    any_probs = False
    for t_len in sorted(by_len):
        idxs = by_len[t_len]
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo: lo + batch_size]
            x = np.stack([ds.sequences[i].x for i in chunk], axis=1)  # [T, B, K]
            trace = unroll(model.layers, model.head, model.policy, model.groups,
                           x, mode="eval", rng=rng, tau=tau)
            logits = np.stack([l.data for l in trace.logits])  # [T, B, C]
            for j, i in enumerate(chunk):
                if model.head.mode == "multiclass":
                    preds[i] = logits[:, j, :].argmax(axis=1)
                else:
                    preds[i] = (_sigmoid_np(logits[:, j, :]) > 0.5).astype(np.float32)
                gates[i] = trace.gates[:, j, :]
                if trace.probs is not None:
                    probs[i] = trace.probs[:, j, :]
                    any_probs = True
    return EvalRun(preds=preds, gates=gates, probs=probs if any_probs else None)


def classification_metrics(preds, labels, mask, mode: str = "multiclass"):
    """(accuracy %, macro-F1 %) over labelled steps or observed cells."""
    p = np.concatenate([np.asarray(a).reshape(len(a), -1) for a in preds])
    y = np.concatenate([np.asarray(a).reshape(len(a), -1) for a in labels])
    m = np.concatenate([np.asarray(a).reshape(len(a), -1) for a in mask])
    if m.sum() == 0:
        raise ValueError("no labelled entries to score")

    if mode == "multiclass":
        p, y, keep = p[:, 0], y[:, 0], m[:, 0] > 0
        p, y = p[keep], y[keep]
        acc = 100.0 * float((p == y).mean())
        classes = sorted(set(np.unique(y)) | set(np.unique(p)))
        f1s = []
        for c in classes:
            tp = float(((p == c) & (y == c)).sum())
            fp = float(((p == c) & (y != c)).sum())
            fn = float(((p != c) & (y == c)).sum())
            denom = 2 * tp + fp + fn
            f1s.append(0.0 if denom == 0 else 2 * tp / denom)
        return acc, 100.0 * float(np.mean(f1s))

    keep = m > 0
    acc = 100.0 * float((p[keep] == y[keep]).mean())
    f1s = []
    for c in range(y.shape[1]):
        k = keep[:, c]
        pc, yc = p[k, c], y[k, c]
        tp = float(((pc == 1) & (yc == 1)).sum())
        fp = float(((pc == 1) & (yc == 0)).sum())
        fn = float(((pc == 0) & (yc == 1)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return acc, 100.0 * float(np.mean(f1s))


def selection_metrics(gates):
    """(average %, union %) of open gates over a list of [T, G] traces."""
    stacked = np.concatenate([np.asarray(g) for g in gates])
    if stacked.size == 0:
        raise ValueError("empty selection trace")
    avg = 100.0 * float(stacked.mean())
    union = 100.0 * float((stacked.max(axis=0) > 0).mean())
    return avg, union


def per_activity_heatmap(gates, labels, mask, label_names):
    """Per-activity gate usage rates.

    Returns (row keys, matrix): cell (a, g) is the fraction of steps
    labelled a in which gate g was open. Unlabelled steps are pooled under
    the reserved key "none"; activities absent from the data are omitted.
    """
    g = np.concatenate([np.asarray(a) for a in gates])
    y = np.concatenate([np.asarray(a) for a in labels])
    m = np.concatenate([np.asarray(a) for a in mask]) > 0
    keys, rows = [], []
    for c, name in enumerate(label_names):
        sel = m & (y == c)
        if sel.any():
            keys.append(name)
            rows.append(g[sel].mean(axis=0))
    if (~m).any():
        keys.append("none")
        rows.append(g[~m].mean(axis=0))
    return keys, np.stack(rows)


def moving_window_accuracy(preds, labels, mask, window: int):
    """Accuracy per non-overlapping window, aggregated across sequences.

    Returns rows (window_start, mean accuracy %, std across sequences).
    Sequences with no labelled step inside a window are skipped for it; the
    std is the sample standard deviation (0 for a single sequence).
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    t_max = max(len(p) for p in preds)
    rows = []
    for start in range(0, t_max, window):
        per_seq = []
        for p, y, m in zip(preds, labels, mask):
            pw = np.asarray(p)[start: start + window]
            yw = np.asarray(y)[start: start + window]
            mw = np.asarray(m)[start: start + window] > 0
            if mw.any():
                per_seq.append(100.0 * float((pw[mw] == yw[mw]).mean()))
        if per_seq:
            std = float(np.std(per_seq, ddof=1)) if len(per_seq) > 1 else 0.0
            rows.append((start, float(np.mean(per_seq)), std))
    return rows


def selection_precision_recall(selected, relevance, contexts):
    """Micro-averaged precision/recall of selected vs relevant feature sets.

    ``selected`` holds per-sequence [T, K] binary feature selections;
    ``contexts`` the true context ids aligned per step. An empty selection
    everywhere scores precision 0.
    """
    inter = sel_total = rel_total = 0.0
    for z, ctx in zip(selected, contexts):
        z = np.asarray(z) > 0
        for t in range(z.shape[0]):
            rel = relevance[int(ctx[t])]
            inter += float(z[t, rel].sum())
            sel_total += float(z[t].sum())
            rel_total += float(len(rel))
    if rel_total == 0:
        raise ValueError("ground-truth relevance is empty")
    precision = inter / sel_total if sel_total > 0 else 0.0
    recall = inter / rel_total
    return precision, recall


@dataclass
class RunReport:
    accuracy: float
    macro_f1: float
    avg_feature_pct: float
    union_feature_pct: float
    heatmap_keys: list[str]
    heatmap: np.ndarray
    moving_rows: list[tuple]
    selection_precision: float | None = None
    selection_recall: float | None = None

    def scalar_rows(self):
        rows = [
            ("accuracy_pct", self.accuracy),
            ("macro_f1_pct", self.macro_f1),
            ("avg_feature_pct", self.avg_feature_pct),
            ("union_feature_pct", self.union_feature_pct),
        ]
        if self.selection_precision is not None:
            rows.append(("selection_precision", self.selection_precision))
            rows.append(("selection_recall", self.selection_recall))
        return rows


def build_report(model, ds, run: EvalRun, *, window: int = 0) -> RunReport:
    labels = [s.y for s in ds.sequences]
    masks = [s.mask for s in ds.sequences]
    acc, f1 = classification_metrics(run.preds, labels, masks, ds.mode)
    avg, union = selection_metrics(run.gates)
    keys, heat = per_activity_heatmap(
        run.gates,
        [s.y if ds.mode == "multiclass" else s.y.argmax(axis=1) for s in ds.sequences],
        [s.mask if ds.mode == "multiclass" else s.mask.max(axis=1) for s in ds.sequences],
        ds.label_names,
    )
    win = window or max(1, max(s.length for s in ds.sequences) // 4)
    moving = moving_window_accuracy(run.preds, labels, masks, win) \
        if ds.mode == "multiclass" else []

    precision = recall = None
    if ds.relevance is not None and all(s.contexts is not None for s in ds.sequences):
        expand = model.groups.expand
        selected = [(g @ expand > 0).astype(np.float32) for g in run.gates]
        precision, recall = selection_precision_recall(
            selected, ds.relevance, [s.contexts for s in ds.sequences]
        )
    return RunReport(
        accuracy=acc, macro_f1=f1, avg_feature_pct=avg, union_feature_pct=union,
        heatmap_keys=keys, heatmap=heat, moving_rows=moving,
        selection_precision=precision, selection_recall=recall,
    )


def write_report_files(report: RunReport, run: EvalRun, ds, out_dir) -> None:
    """Emit report.csv, heatmap.csv, selection_trace.csv, moving_acc.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with (out / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in report.scalar_rows():
            w.writerow([name, f"{value:.6f}"])

    n_gates = report.heatmap.shape[1] if len(report.heatmap_keys) else 0
    with (out / "heatmap.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["activity"] + [f"g{j}" for j in range(n_gates)])
        for key, row in zip(report.heatmap_keys, report.heatmap):
            w.writerow([key] + [f"{v:.6f}" for v in row])

    with (out / "selection_trace.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n_gates = run.gates[0].shape[1]
        w.writerow(["t", "seq"] + [f"g{j}" for j in range(n_gates)])
        for s, g in zip(ds.sequences, run.gates):
            for t in range(g.shape[0]):
                w.writerow([t, s.seq_id] + [str(int(v)) for v in g[t]])

    with (out / "moving_acc.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "accuracy_pct", "std"])
        for start, acc, std in report.moving_rows:
            w.writerow([start, f"{acc:.6f}", f"{std:.6f}"])


def write_tradeoff_csv(path, param_name: str, rows) -> None:
    """Rows of (param value, accuracy %, avg feature %, union feature %)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([param_name, "accuracy_pct", "avg_feature_pct", "union_feature_pct"])
        for value, acc, avg, union in rows:
            w.writerow([f"{value:g}", f"{acc:.6f}", f"{avg:.6f}", f"{union:.6f}"])
