"""Training loop, evaluation metrics and checkpoints."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from pstp import autodiff as ad
from pstp.config import ModelConfig, TrainConfig
from pstp.errors import ConfigError, DataError, EmptySplitError, FormatError, NumericalAbort
from pstp.features import FeatureBundle, read_container, write_container
from pstp.model import PSTPNet, SelectionTrace, stack_bundles
from pstp.nn import Adam

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    accuracy: float
    per_qtype: dict[str, float]
    qtype_counts: dict[str, int]
    loss: float
    n: int
    tssm_hit_rate: float | None = None
    srsm_hit_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def selection_hits(trace: SelectionTrace, bundles: Sequence[FeatureBundle], T: int):
    """Per-sample (segment hit, patch hit) flags for planted bundles.

    A patch hit needs the planted segment to be kept and the planted patch
    to be kept in at least half of that segment's frames.
    """
    seg_hits, patch_hits = [], []
    for i, b in enumerate(bundles):
        kept = trace.segment_indices[i]
        seg_hit = b.planted_segment in kept
        seg_hits.append(seg_hit)
        if trace.patch_indices is None:
            patch_hits.append(seg_hit)
            continue
        if not seg_hit:
            patch_hits.append(False)
            continue
        slot = int(np.flatnonzero(kept == b.planted_segment)[0])
        frames = trace.patch_indices[i, slot * T:(slot + 1) * T]
        n_in = sum(b.planted_patch in f for f in frames)
        patch_hits.append(2 * n_in >= T)
    return np.array(seg_hits), np.array(patch_hits)


def predict_batches(model: PSTPNet, bundles: Sequence[FeatureBundle], batch_size: int = 256):
    """Yield ``(chunk, ForwardResult)`` over ``bundles`` without recording a tape."""
    for start in range(0, len(bundles), batch_size):
        chunk = bundles[start:start + batch_size]
        yield chunk, model.forward(stack_bundles(chunk, model.dtype))


def evaluate(model: PSTPNet, dataset: Sequence[FeatureBundle], batch_size: int = 256,
             predictions: np.ndarray | None = None) -> Metrics:
    """Accuracy overall and per question type, mean loss, and hit-rates.

    ``predictions`` overrides the model's argmax (used to score external
    predictions against the same bookkeeping).
    """
    if not dataset:
        raise EmptySplitError("cannot evaluate an empty split")
    preds, losses, seg_hits, patch_hits = [], [], [], []
    planted = all(b.has_plant for b in dataset)
    for chunk, res in predict_batches(model, dataset, batch_size):
        preds.append(res.probs.data.argmax(axis=-1))
        labels = np.array([b.answer for b in chunk])
        losses.append(float(ad.cross_entropy(res.logits, labels).data) * len(chunk))
        if planted:
            s, p = selection_hits(res.trace, chunk, model.cfg.T)
            seg_hits.append(s)
            patch_hits.append(p)
    pred = np.concatenate(preds) if predictions is None else np.asarray(predictions)
    labels = np.array([b.answer for b in dataset])
    correct = pred == labels
    by_type: dict[str, list[bool]] = defaultdict(list)
    for b, ok in zip(dataset, correct):
        by_type[b.qtype].append(bool(ok))
    return Metrics(
        accuracy=float(correct.mean()),
        per_qtype={k: float(np.mean(v)) for k, v in sorted(by_type.items())},
        qtype_counts={k: len(v) for k, v in sorted(by_type.items())},
        loss=float(sum(losses) / len(dataset)),
        n=len(dataset),
        tssm_hit_rate=float(np.concatenate(seg_hits).mean()) if planted else None,
        srsm_hit_rate=float(np.concatenate(patch_hits).mean()) if planted else None,
    )


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int | None = None
    best_val_accuracy: float | None = None
    optimizer: Adam | None = None
    epochs_done: int = 0


def _refuse_test_split(bundles: Sequence[FeatureBundle], what: str) -> None:
    leaked = [b.video_id for b in bundles if b.split == "test"]
    if leaked:
        raise DataError(f"{what} contains {len(leaked)} test-split bundle(s), e.g. {leaked[0]}")


def train(
    model: PSTPNet,
    dataset: Sequence[FeatureBundle],
    cfg: TrainConfig,
    val_set: Sequence[FeatureBundle] | None = None,
    log: Callable[[dict], None] | None = None,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    max_steps: int | None = None,
    restore_best: bool = True,
) -> TrainResult:
    """Mini-batch Adam with a step learning-rate schedule.

    Batches are reshuffled each epoch from ``(cfg.seed, epoch)`` and the last
    short batch is kept.  When ``val_set`` is given the best epoch by
    validation accuracy (earliest on ties) is kept and, with
    ``restore_best``, loaded back into ``model`` at the end.
    """
    if not dataset:
        raise DataError("training set is empty")
    _refuse_test_split(dataset, "training set")
    if val_set:
        _refuse_test_split(val_set, "validation set")
    optimizer = optimizer or Adam(list(model.named_parameters()), lr=cfg.lr)
    result = TrainResult(optimizer=optimizer, epochs_done=start_epoch)
    emit = log or (lambda record: None)
    n = len(dataset)
    step = int(optimizer.state["t"])

    for epoch in range(start_epoch, cfg.epochs):
        optimizer.lr = cfg.lr_at(epoch)
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        epoch_losses = []
        for batch_id, start in enumerate(range(0, n, cfg.batch_size)):
            if max_steps is not None and step >= max_steps:
                break
            chunk = [dataset[i] for i in order[start:start + cfg.batch_size]]
            batch = stack_bundles(chunk, model.dtype)
            model.zero_grad()
            with ad.Tape() as tape:
                loss, _ = model.loss(batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalAbort(f"non-finite loss {value} at epoch {epoch}, batch {batch_id}")
            tape.backward(loss)
            optimizer.step()
            step += 1
            epoch_losses.append(value)
            result.step_losses.append(value)
        if not epoch_losses:
            break
        record = {
            "event": "epoch",
            "epoch": epoch,
            "lr": optimizer.lr,
            "steps": step,
            "train_loss": float(np.mean(epoch_losses)),
        }
        if val_set:
            metrics = evaluate(model, val_set)
            record["val"] = metrics.to_dict()
            if result.best_val_accuracy is None or metrics.accuracy > result.best_val_accuracy:
                result.best_val_accuracy = metrics.accuracy
                result.best_epoch = epoch
                result.best_state = model.state_dict()
        result.history.append(record)
        result.epochs_done = epoch + 1
        emit(record)
        logger.debug("epoch %d loss %.6f", epoch, record["train_loss"])

    if val_set and restore_best and result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result


def format_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: PSTPNet, optimizer: Adam | None = None,
                    train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    tensors = {f"param.{name}": p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    manifest = {
        "kind": "checkpoint",
        "model": model.cfg.to_dict(),
        "train": train_cfg.to_dict() if train_cfg else None,
        "extra": extra or {},
    }
    write_container(path, manifest, tensors, dtype=str(model.dtype))


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Rebuild the model (and Adam state, when stored) from ``path``.

    Returns ``(model, optimizer_or_None, manifest)``.  ``expect`` guards
    against loading parameters trained under a different architecture.
    """
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint (kind={manifest.get('kind')!r})")
    cfg = ModelConfig.from_dict(manifest["model"])
    if expect is not None and expect != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expect.to_dict().items() if getattr(cfg, k) != v}
        raise ConfigError(f"checkpoint config mismatch (expected, stored): {diff}")
    model = PSTPNet(cfg, dtype=manifest["dtype"])
    model.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    optimizer = None
    if "adam.t" in tensors:
        train_cfg = TrainConfig.from_dict(manifest["train"]) if manifest.get("train") else TrainConfig()
        optimizer = Adam(list(model.named_parameters()), lr=train_cfg.lr)
        optimizer.load_state_arrays(tensors)
    return model, optimizer, manifest
