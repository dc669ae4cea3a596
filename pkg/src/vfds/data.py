"""Datasets: synthetic benchmark with known relevance, CSV ingestion, prep.

The synthetic generator drives a hidden context through a Markov chain and
makes only the current context's feature subset informative, so a trained
selector can be scored against the true per-step relevant set. CSV files
use the long schema ``subject,seq,t,label,f1..fK`` (multilabel:
``label1..labelC`` columns); an empty label cell marks an unlabelled step
and empty feature cells are imputed with zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Malformed dataset file; message carries the offending line."""


@dataclass
class Sequence:
    x: np.ndarray  # [T, K] float32
    y: np.ndarray  # [T] int64 labels, or [T, C] float32 multilabel targets
    mask: np.ndarray  # [T] or [T, C] float32, 1 where labelled
    subject: str
    seq_id: str
    contexts: np.ndarray | None = None  # [T] int64 ground-truth context

    @property
    def length(self) -> int:
        return self.x.shape[0]


@dataclass
class SequenceDataset:
    sequences: list[Sequence]
    feature_names: list[str]
    label_names: list[str]
    mode: str = "multiclass"  # or "multilabel"
    relevance: dict[int, list[int]] | None = None  # context -> relevant columns

    def __post_init__(self):
        k = len(self.feature_names)
        for s in self.sequences:
            if s.length < 1:
                raise ValueError("sequences must have at least one step")
            if s.x.shape[1] != k:
                raise ValueError("inconsistent feature count across sequences")
            if s.mask.shape != s.y.shape:
                raise ValueError("mask shape must match label shape")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_outputs(self) -> int:
        return len(self.label_names)

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.sequences:
            seen.setdefault(s.subject, None)
        return list(seen)


@dataclass
class SyntheticSpec:
    """Hidden-Markov context benchmark with per-context relevant features.

    Labels follow ``label_rule``:

    * ``"context-sign"`` (default): fresh coins b (the label bit) and d (a
      dither) per step; feature j of the active context's set reads
      amplitude * (2b - 1) + amplitude * d * (-1)^j plus noise, and the
      label is 2 * context + b. The dither cancels across the set, so the
      sum of the active features decodes b exactly while any single feature
      is ambiguous half the time: the whole current set must be observed at
      every step.
    * ``"context"``: the label is the context id and active features sit at
      +amplitude.

    Features outside the active context's set are pure Gaussian noise.
    """

    n_features: int = 20
    n_contexts: int = 3
    relevant: list[list[int]] = field(default_factory=lambda: [[0, 1], [2, 3], [4, 5]])
    stay_prob: float = 0.95
    transition: list[list[float]] | None = None
    noise_std: float = 0.3
    amplitude: float = 1.0
    seq_len: int = 60
    n_sequences: int = 90
    n_subjects: int = 9
    label_rule: str = "context-sign"

    def validate(self) -> "SyntheticSpec":
        if len(self.relevant) != self.n_contexts:
            raise ValueError("one relevant feature set per context is required")
        for cols in self.relevant:
            if not cols or any(c < 0 or c >= self.n_features for c in cols):
                raise ValueError("relevant columns must lie inside the feature range")
        t = self.transition_matrix()
        if t.shape != (self.n_contexts, self.n_contexts) or (t < 0).any():
            raise ValueError("transition matrix must be nonnegative and square")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must sum to 1")
        if self.label_rule not in ("context-sign", "context"):
            raise ValueError("label_rule must be context-sign or context")
        if self.seq_len < 1 or self.n_sequences < 1 or self.n_subjects < 1:
            raise ValueError("seq_len, n_sequences, n_subjects must be positive")
        return self

    def transition_matrix(self) -> np.ndarray:
        if self.transition is not None:
            return np.asarray(self.transition, dtype=np.float64)
        m = self.n_contexts
        if m == 1:
            return np.ones((1, 1))
        off = (1.0 - self.stay_prob) / (m - 1)
        t = np.full((m, m), off)
        np.fill_diagonal(t, self.stay_prob)
        return t

    @property
    def n_labels(self) -> int:
        return 2 * self.n_contexts if self.label_rule == "context-sign" else self.n_contexts

    def to_dict(self) -> dict:
        import dataclasses

        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        import dataclasses

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d).validate()


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SequenceDataset:
    """Sample a dataset from the spec; bit-identical for equal seeds."""
    spec.validate()
    trans = spec.transition_matrix()
    children = np.random.SeedSequence(seed).spawn(spec.n_sequences)
    sequences = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        t_len, k = spec.seq_len, spec.n_features
        ctx = np.empty(t_len, dtype=np.int64)
        ctx[0] = rng.integers(spec.n_contexts)
        for t in range(1, t_len):
            ctx[t] = rng.choice(spec.n_contexts, p=trans[ctx[t - 1]])
        x = rng.normal(0.0, spec.noise_std, (t_len, k)).astype(np.float32)
        if spec.label_rule == "context-sign":
            bits = rng.integers(0, 2, t_len)
            carrier = spec.amplitude * (2 * bits - 1).astype(np.float32)
            dither = spec.amplitude * (2 * rng.integers(0, 2, t_len) - 1).astype(np.float32)
            y = 2 * ctx + bits
            for t in range(t_len):
                for j, col in enumerate(spec.relevant[ctx[t]]):
                    x[t, col] += carrier[t] + (dither[t] if j % 2 == 0 else -dither[t])
        else:
            y = ctx.copy()
            for t in range(t_len):
                x[t, spec.relevant[ctx[t]]] += spec.amplitude
        sequences.append(
            Sequence(
                x=x,
                y=y.astype(np.int64),
                mask=np.ones(t_len, dtype=np.float32),
                subject=f"s{i % spec.n_subjects:03d}",
                seq_id=f"q{i:04d}",
                contexts=ctx,
            )
        )
    return SequenceDataset(
        sequences=sequences,
        feature_names=[f"f{j + 1}" for j in range(spec.n_features)],
        label_names=[str(c) for c in range(spec.n_labels)],
        mode="multiclass",
        relevance={m: list(cols) for m, cols in enumerate(spec.relevant)},
    )


def oracle_predictions(ds: SequenceDataset) -> list[np.ndarray]:
    """Nearest-centroid predictions of a clairvoyant reader.

    Fit on the ground-truth context: for every context, per-label centroids
    of the relevant feature columns; each step is classified among the
    labels seen under its true context, reading only that context's columns.
    """
    if ds.relevance is None:
        raise ValueError("dataset carries no ground-truth relevance")
    cols = {m: np.asarray(v, dtype=np.int64) for m, v in ds.relevance.items()}
    buckets: dict[tuple[int, int], list[np.ndarray]] = {}
    for s in ds.sequences:
        if s.contexts is None:
            raise ValueError("dataset carries no ground-truth contexts")
        for t in range(s.length):
            if s.mask[t]:
                key = (int(s.contexts[t]), int(s.y[t]))
                buckets.setdefault(key, []).append(s.x[t, cols[int(s.contexts[t])]])
    centroids = {key: np.mean(vals, axis=0) for key, vals in buckets.items()}
    by_context: dict[int, list[tuple[int, np.ndarray]]] = {}
    for (m, label), c in centroids.items():
        by_context.setdefault(m, []).append((label, c))

    preds = []
    for s in ds.sequences:
        p = np.zeros(s.length, dtype=np.int64)
        for t in range(s.length):
            m = int(s.contexts[t])
            best, best_d = 0, np.inf
            for label, c in by_context[m]:
                d = float(((s.x[t, cols[m]] - c) ** 2).sum())
                if d < best_d:
                    best, best_d = label, d
            p[t] = best
        preds.append(p)
    return preds


def oracle_accuracy(ds: SequenceDataset) -> float:
    """Accuracy of the clairvoyant reader over labelled steps, in percent."""
    preds = oracle_predictions(ds)
    hit = total = 0
    for s, p in zip(ds.sequences, preds):
        lab = s.mask > 0
        hit += int((p[lab] == s.y[lab]).sum())
        total += int(lab.sum())
    return 100.0 * hit / total


def oracle_selection_trace(ds: SequenceDataset) -> list[np.ndarray]:
    """Per-step one-hot selection of exactly the true context's columns."""
    if ds.relevance is None:
        raise ValueError("dataset carries no ground-truth relevance")
    traces = []
    for s in ds.sequences:
        z = np.zeros((s.length, ds.n_features), dtype=np.float32)
        for t in range(s.length):
            z[t, ds.relevance[int(s.contexts[t])]] = 1.0
        traces.append(z)
    return traces


def _fmt(v: float) -> str:
    return str(np.float32(v))


def save_csv(ds: SequenceDataset, path) -> None:
    """Write the dataset as one long-format CSV file."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if ds.mode == "multiclass":
            label_cols = ["label"]
        else:
            label_cols = [f"label{i + 1}" for i in range(ds.n_outputs)]
        w.writerow(["subject", "seq", "t"] + label_cols + list(ds.feature_names))
        for s in ds.sequences:
            for t in range(s.length):
                if ds.mode == "multiclass":
                    labels = [ds.label_names[int(s.y[t])] if s.mask[t] else ""]
                else:
                    labels = [
                        (str(int(s.y[t, c])) if s.mask[t, c] else "")
                        for c in range(ds.n_outputs)
                    ]
                row = [s.subject, s.seq_id, str(t)] + labels + [_fmt(v) for v in s.x[t]]
                w.writerow(row)


def save_truth(ds: SequenceDataset, path) -> None:
    """Write ground-truth relevance and per-step contexts as JSON."""
    if ds.relevance is None:
        raise ValueError("dataset carries no ground truth")
    out = {
        "relevance": {str(m): list(map(int, v)) for m, v in ds.relevance.items()},
        "contexts": {},
    }
    for s in ds.sequences:
        out["contexts"].setdefault(s.subject, {})[s.seq_id] = [int(c) for c in s.contexts]
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(out, fh)
        fh.write("\n")


def load_truth(ds: SequenceDataset, path) -> SequenceDataset:
    """Attach ground truth from a JSON file to a loaded dataset."""
    with Path(path).open(encoding="utf-8") as fh:
        raw = json.load(fh)
    relevance = {int(m): list(map(int, v)) for m, v in raw["relevance"].items()}
    sequences = []
    for s in ds.sequences:
        try:
            ctx = raw["contexts"][s.subject][s.seq_id]
        except KeyError:
            raise DataFormatError(f"no ground truth for sequence {s.subject}/{s.seq_id}")
        if len(ctx) != s.length:
            raise DataFormatError(f"ground-truth length mismatch for {s.seq_id}")
        sequences.append(replace(s, contexts=np.asarray(ctx, dtype=np.int64)))
    return replace(ds, sequences=sequences, relevance=relevance)


def load_csv(path, label_names: list[str] | None = None) -> SequenceDataset:
    """Parse one CSV file or a directory of them (merged in name order).

    ``label_names`` pins the label-to-index mapping (as stored in a training
    run); a label outside it is a format error. Without it, labels are
    collected and sorted. Missing feature cells are imputed with zero.
    """
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise DataFormatError(f"no CSV files under {path}")

    mode = None
    feature_names = None
    n_label_cols = 0
    rows_by_seq: dict[tuple[str, str], list] = {}
    order: list[tuple[str, str]] = []

    for fp in files:
        with fp.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataFormatError(f"{fp}: empty file")
            if header[:3] != ["subject", "seq", "t"]:
                raise DataFormatError(f"{fp}:1: header must start with subject,seq,t")
            rest = header[3:]
            if rest[:1] == ["label"]:
                fmode, nlab, feats = "multiclass", 1, rest[1:]
            else:
                nlab = 0
                while nlab < len(rest) and rest[nlab] == f"label{nlab + 1}":
                    nlab += 1
                if nlab == 0:
                    raise DataFormatError(f"{fp}:1: no label column(s) found")
                fmode, feats = "multilabel", rest[nlab:]
            if not feats:
                raise DataFormatError(f"{fp}:1: no feature columns found")
            if mode is None:
                mode, n_label_cols, feature_names = fmode, nlab, feats
            elif fmode != mode or feats != feature_names:
                raise DataFormatError(f"{fp}:1: schema differs from earlier files")

            for lineno, row in enumerate(reader, start=2):
                if len(row) != 3 + n_label_cols + len(feature_names):
                    raise DataFormatError(f"{fp}:{lineno}: expected "
                                          f"{3 + n_label_cols + len(feature_names)} cells, got {len(row)}")
                subject, seq_id, t_str = row[0], row[1], row[2]
                try:
                    t = int(t_str)
                except ValueError:
                    raise DataFormatError(f"{fp}:{lineno}: non-integer time index {t_str!r}")
                labels = row[3:3 + n_label_cols]
                feats_raw = row[3 + n_label_cols:]
                vals = np.zeros(len(feature_names), dtype=np.float32)
                for j, cell in enumerate(feats_raw):
                    if cell == "":
                        continue  # missing value, imputed with zero
                    try:
                        vals[j] = np.float32(cell)
                    except ValueError:
                        raise DataFormatError(f"{fp}:{lineno}: non-numeric cell {cell!r}")
                key = (subject, seq_id)
                if key not in rows_by_seq:
                    rows_by_seq[key] = []
                    order.append(key)
                rows_by_seq[key].append((t, labels, vals, f"{fp}:{lineno}"))

    if mode == "multiclass" and label_names is None:
        seen = set()
        for rows in rows_by_seq.values():
            for _, labels, _, _ in rows:
                if labels[0] != "":
                    seen.add(labels[0])
        label_names = sorted(seen)
    elif mode == "multilabel" and label_names is None:
        label_names = [f"label{i + 1}" for i in range(n_label_cols)]
    label_index = {name: i for i, name in enumerate(label_names)}

    sequences = []
    for key in order:
        rows = sorted(rows_by_seq[key], key=lambda r: r[0])
        t_len = len(rows)
        x = np.stack([r[2] for r in rows])
        if mode == "multiclass":
            y = np.zeros(t_len, dtype=np.int64)
            m = np.zeros(t_len, dtype=np.float32)
            for i, (_, labels, _, loc) in enumerate(rows):
                if labels[0] == "":
                    continue
                if labels[0] not in label_index:
                    raise DataFormatError(f"{loc}: unknown label {labels[0]!r}")
                y[i] = label_index[labels[0]]
                m[i] = 1.0
        else:
            y = np.zeros((t_len, n_label_cols), dtype=np.float32)
            m = np.zeros((t_len, n_label_cols), dtype=np.float32)
            for i, (_, labels, _, loc) in enumerate(rows):
                for c, cell in enumerate(labels):
                    if cell == "":
                        continue
                    if cell not in ("0", "1"):
                        raise DataFormatError(f"{loc}: multilabel cell must be 0/1/empty, got {cell!r}")
                    y[i, c] = float(cell)
                    m[i, c] = 1.0
        sequences.append(Sequence(x=x, y=y, mask=m, subject=key[0], seq_id=key[1]))

    return SequenceDataset(
        sequences=sequences,
        feature_names=list(feature_names),
        label_names=list(label_names),
        mode=mode,
    )


@dataclass
class Normalizer:
    """Feature statistics fit on the training split only."""

    mode: str
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, ds: SequenceDataset, mode: str) -> "Normalizer":
        x = np.concatenate([s.x for s in ds.sequences], axis=0).astype(np.float64)
        if mode == "zscore":
            center = x.mean(axis=0)
            scale = x.std(axis=0)
        elif mode == "minmax":
            lo, hi = x.min(axis=0), x.max(axis=0)
            center = (lo + hi) / 2.0
            scale = (hi - lo) / 2.0
        elif mode == "none":
            center = np.zeros(x.shape[1])
            scale = np.ones(x.shape[1])
        else:
            raise ValueError(f"unknown normalization mode {mode!r}")
        # constant features map to 0 rather than dividing by zero
        scale = np.where(scale == 0, 1.0, scale)
        return cls(mode=mode, center=center.astype(np.float32), scale=scale.astype(np.float32))

    def apply(self, ds: SequenceDataset) -> SequenceDataset:
        sequences = [
            replace(s, x=((s.x - self.center) / self.scale).astype(np.float32))
            for s in ds.sequences
        ]
        return replace(ds, sequences=sequences)


def segment(ds: SequenceDataset, length: int, pad: str = "repeat") -> SequenceDataset:
    """Chop sequences into length-L windows; short tails are padded.

    Padded steps repeat the last observed row (or are zero with
    ``pad="zero"``) and always carry mask 0, so they never touch the loss.
    """
    if length < 1:
        raise ValueError("segment length must be at least 1")
    if pad not in ("repeat", "zero"):
        raise ValueError("pad must be repeat or zero")
    out = []
    for s in ds.sequences:
        n_windows = max(1, -(-s.length // length))
        for w in range(n_windows):
            lo, hi = w * length, min((w + 1) * length, s.length)
            x, y, m = s.x[lo:hi], s.y[lo:hi], s.mask[lo:hi]
            ctx = None if s.contexts is None else s.contexts[lo:hi]
            short = length - (hi - lo)
            if short > 0:
                if pad == "repeat":
                    x_pad = np.repeat(x[-1:], short, axis=0)
                else:
                    x_pad = np.zeros((short, x.shape[1]), dtype=x.dtype)
                x = np.concatenate([x, x_pad])
                y = np.concatenate([y, np.repeat(y[-1:], short, axis=0)])
                m = np.concatenate([m, np.zeros((short,) + m.shape[1:], dtype=m.dtype)])
                if ctx is not None:
                    ctx = np.concatenate([ctx, np.repeat(ctx[-1:], short)])
            out.append(Sequence(x=x, y=y, mask=m, subject=s.subject,
                                seq_id=f"{s.seq_id}w{w}", contexts=ctx))
    return replace(ds, sequences=out)


def split(ds: SequenceDataset, ratios, by: str = "subject", seed: int = 0):
    """Deterministic train/val/test split; subject mode keeps subjects whole."""
    ratios = list(ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three nonnegative values summing to 1")
    rng = np.random.default_rng(seed)

    if by == "subject":
        units = ds.subjects
    elif by == "random":
        units = list(range(len(ds.sequences)))
    else:
        raise ValueError("split mode must be subject or random")

    n_needed = sum(1 for r in ratios if r > 0)
    if len(units) < n_needed:
        raise ValueError(f"need at least {n_needed} {by} units, have {len(units)}")

    perm = [units[i] for i in rng.permutation(len(units))]
    n = len(perm)
    cuts = [int(np.floor(n * ratios[0])), int(np.floor(n * (ratios[0] + ratios[1])))]
    parts = [perm[: cuts[0]], perm[cuts[0]: cuts[1]], perm[cuts[1]:]]
    # never leave a requested split empty while another can spare a unit
    for i in range(3):
        if ratios[i] > 0 and not parts[i]:
            donor = max(range(3), key=lambda j: len(parts[j]))
            parts[i].append(parts[donor].pop())

    out = []
    for members in parts:
        chosen = set(members)
        if by == "subject":
            seqs = [s for s in ds.sequences if s.subject in chosen]
        else:
            seqs = [s for i, s in enumerate(ds.sequences) if i in chosen]
        out.append(replace(ds, sequences=seqs))
    return tuple(out)
