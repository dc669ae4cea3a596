"""Training engine: RMSProp on the gated sequence objective, checkpoints.

One run is one logical thread of parameter mutation: all randomness flows
from the config seed through fixed-order streams (init, batch shuffling,
gate noise, validation), so equal seeds give byte-identical logs and
checkpoints. Sweeps launch independent runs with derived seeds.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import masked_sequence_loss, unroll
from .config import TrainConfig
from .data import SequenceDataset, Normalizer, segment, split
from .model import Model, build_model
from .report import classification_metrics, run_model, selection_metrics, write_tradeoff_csv
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger("vfds")

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """The loss left the finite range; checkpoints up to the failure remain."""


def rmsprop_update(param: np.ndarray, grad: np.ndarray, state: np.ndarray,
                   lr: float, smoothing: float, eps: float) -> None:
    """In-place RMSProp step: v <- rho v + (1-rho) g^2; p <- p - lr g/(sqrt(v)+eps)."""
    state *= smoothing
    state += (1.0 - smoothing) * grad * grad
    param -= lr * grad / (np.sqrt(state) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def gate_penalty(sigmas, costs: np.ndarray, lam: float, t_len: int, batch: int):
    """Sparsity term lam * mean over (batch, time) of sum_k c_k sigma_k."""
    tile = None
    if not np.all(costs == 1.0):
        tile = Tensor(np.tile(costs.astype(np.float32), (batch, 1)))
    total = None
    for sig in sigmas:
        term = sig if tile is None else sig * tile
        s = term.sum()
        total = s if total is None else total + s
    return total * (lam / (t_len * batch))


@dataclass
class TrainResult:
    model: Model
    log_rows: list[dict]
    best_epoch: int
    best_val_acc: float
    best_params: dict[str, np.ndarray]
    out_dir: Path | None


def _batch_indices(lengths, batch_size, rng) -> list[list[int]]:
    """Shuffle then group by equal length so batches stack rectangularly."""
    order = rng.permutation(len(lengths))
    by_len: dict[int, list[int]] = {}
    for i in order:
        by_len.setdefault(int(lengths[i]), []).append(int(i))
    batches = []
    for t_len in sorted(by_len):
        idxs = by_len[t_len]
        for lo in range(0, len(idxs), batch_size):
            batches.append(idxs[lo: lo + batch_size])
    return batches


def _stack_batch(ds: SequenceDataset, idxs):
    seqs = [ds.sequences[i] for i in idxs]
    x = np.stack([s.x for s in seqs], axis=1)  # [T, B, K]
    y = np.stack([s.y for s in seqs], axis=1)
    m = np.stack([s.mask for s in seqs], axis=1)
    return x, y, m


def train(cfg: TrainConfig, train_ds: SequenceDataset, val_ds: SequenceDataset,
          out_dir=None) -> TrainResult:
    """Optimize the model on the training split, checkpointing each epoch.

    Saves the latest model and the best model by validation accuracy
    (deterministic test-time gates). The training log records per epoch:
    mean batch loss, validation accuracy and macro-F1, and the validation
    average feature percentage.
    """
    cfg.validate()
    if not train_ds.sequences or not val_ds.sequences:
        raise ValueError("train and validation splits must both be nonempty")
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init = np.random.default_rng(streams[0])
    rng_shuffle = np.random.default_rng(streams[1])
    rng_noise = np.random.default_rng(streams[2])
    eval_seed = streams[3].entropy

    model = build_model(cfg, train_ds.n_features, train_ds.n_outputs,
                        train_ds.mode, rng_init)
    params = model.parameters()
    opt_state = {name: np.zeros_like(p.data) for name, p in params.items()}
    lengths = [s.length for s in train_ds.sequences]

    out = None
    log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.json")
        log_fh = (out / "log.csv").open("w", newline="", encoding="utf-8")
        log_fh.write("epoch,train_loss,val_acc,val_f1,avg_feat_pct\n")

    manifest_base = {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg.config_hash(),
        "mode": train_ds.mode,
        "label_names": list(train_ds.label_names),
        "feature_names": list(train_ds.feature_names),
    }

    log_rows: list[dict] = []
    best_acc = -np.inf
    best_epoch = 0
    best_params = {name: p.data.copy() for name, p in params.items()}
    try:
        for epoch in range(1, cfg.epochs + 1):
            epoch_losses = []
            for idxs in _batch_indices(lengths, cfg.batch_size, rng_shuffle):
                x, y, m = _stack_batch(train_ds, idxs)
                t_len, batch = x.shape[0], x.shape[1]
                observed = float(m.sum())
                if observed == 0:
                    raise ValueError("degenerate batch: no labelled entries")
                try:
                    with Tape() as tape:
                        trace = unroll(model.layers, model.head, model.policy,
                                       model.groups, x, mode="train", rng=rng_noise,
                                       tau=cfg.tau, labels=y, mask=m,
                                       loss_weight=1.0 / observed)
                        loss = masked_sequence_loss(trace.logits, y, m, train_ds.mode)
                        if cfg.lam > 0 and trace.sigmas is not None:
                            loss = loss + gate_penalty(trace.sigmas, model.prior.costs,
                                                       cfg.lam, t_len, batch)
                        loss_val = loss.item()
                        if not math.isfinite(loss_val):
                            raise NonFiniteError("loss is not finite")
                        tape.backward(loss)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}; "
                        f"checkpoints retain epoch {epoch - 1}"
                    ) from exc
                grads = {
                    name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for name, p in params.items()
                }
                clip_gradients(grads, cfg.clip_norm)
                for name, p in params.items():
                    rmsprop_update(p.data, grads[name], opt_state[name],
                                   cfg.learning_rate, cfg.rmsprop_smoothing,
                                   cfg.rmsprop_epsilon)
                epoch_losses.append(loss_val)

            val_run = run_model(model, val_ds, tau=cfg.tau, seed=eval_seed)
            val_acc, val_f1 = classification_metrics(
                val_run.preds, [s.y for s in val_ds.sequences],
                [s.mask for s in val_ds.sequences], val_ds.mode)
            avg_feat, _ = selection_metrics(val_run.gates)
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_acc": val_acc,
                "val_f1": val_f1,
                "avg_feat_pct": avg_feat,
            }
            log_rows.append(row)
            log.info("epoch %d loss %.5f val_acc %.2f feat %.1f%%",
                     epoch, row["train_loss"], val_acc, avg_feat)
            if log_fh is not None:
                log_fh.write("{epoch},{train_loss:.8g},{val_acc:.8g},"
                             "{val_f1:.8g},{avg_feat_pct:.8g}\n".format(**row))
                log_fh.flush()

            if out is not None:
                save_checkpoint(out / "ckpt_latest", params,
                                dict(manifest_base, epoch=epoch, val_acc=val_acc))
            # ties go to the later epoch: equal accuracy, more converged gates
            if val_acc >= best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_params = {name: p.data.copy() for name, p in params.items()}
                if out is not None:
                    save_checkpoint(out / "ckpt_best", params,
                                    dict(manifest_base, epoch=epoch, val_acc=val_acc))
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(model=model, log_rows=log_rows, best_epoch=best_epoch,
                       best_val_acc=float(best_acc), best_params=best_params,
                       out_dir=out)


def save_checkpoint(path, params, manifest: dict) -> None:
    """Write manifest.json plus one raw little-endian float32 blob per tensor."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["params"] = {name: list(p.data.shape) for name, p in params.items()}
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        (path / "params" / f"{name}.bin").write_bytes(blob)
    with (path / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint directory back into (manifest, arrays)."""
    path = Path(path)
    with (path / "manifest.json").open(encoding="utf-8") as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, shape in manifest["params"].items():
        blob = (path / "params" / f"{name}.bin").read_bytes()
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(np.float32)
    return manifest, arrays


def restore_model(cfg: TrainConfig, manifest: dict, arrays: dict) -> Model:
    """Rebuild a model and load checkpoint arrays into its parameters."""
    model = build_model(cfg, len(manifest["feature_names"]),
                        len(manifest["label_names"]), manifest["mode"],
                        np.random.default_rng(cfg.seed))
    params = model.parameters()
    if set(params) != set(arrays):
        raise ValueError("checkpoint parameters do not match the configuration")
    for name, p in params.items():
        if tuple(p.data.shape) != tuple(arrays[name].shape):
            raise ValueError(f"shape mismatch for {name}")
        p.data[...] = arrays[name]
    return model


def prepare_splits(cfg: TrainConfig, ds: SequenceDataset):
    """Split, normalize on train only, and optionally segment."""
    train_ds, val_ds, test_ds = split(ds, cfg.split_ratios, by=cfg.split_by,
                                      seed=cfg.seed)
    norm = Normalizer.fit(train_ds, cfg.normalize)
    parts = [norm.apply(p) for p in (train_ds, val_ds, test_ds)]
    if cfg.segment_len > 0:
        parts = [segment(p, cfg.segment_len, cfg.pad) for p in parts]
    return (*parts, norm)


def _evaluate_row(cfg, result: TrainResult, test_ds, value):
    model = result.model
    for name, p in model.parameters().items():
        p.data[...] = result.best_params[name]
    run = run_model(model, test_ds, tau=cfg.tau, seed=cfg.seed)
    acc, _ = classification_metrics(run.preds, [s.y for s in test_ds.sequences],
                                    [s.mask for s in test_ds.sequences], test_ds.mode)
    avg, union = selection_metrics(run.gates)
    return (value, acc, avg, union)


def _sweep_one(args):
    cfg_dict, lam, seed, train_blob, val_blob, test_blob, run_dir = args
    cfg = TrainConfig.from_dict(cfg_dict).replace(lam=lam, seed=seed)
    result = train(cfg, train_blob, val_blob, run_dir)
    return _evaluate_row(cfg, result, test_blob, lam)


def sweep_lambda(cfg: TrainConfig, lambdas, train_ds, val_ds, test_ds,
                 out_dir=None, jobs: int = 1):
    """Independent trainings per sparsity weight; rows sorted by lambda.

    Each run derives its seed as base seed + index so runs stay independent
    and reproducible. Returns rows (lambda, test accuracy %, avg feature %,
    union feature %) and writes tradeoff.csv when out_dir is given.
    """
    if not lambdas:
        raise ValueError("lambda list must be nonempty")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i, lam in enumerate(lambdas):
        run_dir = None if out is None else out / f"lambda_{lam:g}"
        tasks.append((cfg.to_dict(), float(lam), cfg.seed + i,
                      train_ds, val_ds, test_ds, run_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    rows.sort(key=lambda r: r[0])
    if out is not None:
        write_tradeoff_csv(out / "tradeoff.csv", "lambda", rows)
    return rows


def sweep_alpha(cfg: TrainConfig, alphas, train_ds, val_ds, test_ds,
                out_dir=None, jobs: int = 1):
    """Attention threshold sweep: one training, thresholds applied at eval.

    The threshold only enters the test-time selection rule, so a single
    trained attention model is evaluated under each alpha.
    """
    if not alphas:
        raise ValueError("alpha list must be nonempty")
    if cfg.policy != "attention":
        raise ValueError("alpha sweeps require the attention policy")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, train_ds, val_ds, None if out is None else out / "attention_run")
    rows = []
    for alpha in alphas:
        result.model.policy.alpha = float(alpha)
        rows.append(_evaluate_row(cfg, result, test_ds, float(alpha)))
    rows.sort(key=lambda r: r[0])
    if out is not None:
        write_tradeoff_csv(out / "tradeoff.csv", "alpha", rows)
    return rows
