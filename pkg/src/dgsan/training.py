"""Losses, the adaptive-moment optimizer with step decay, training loops,
cross-validation and ablation runs.

Run directory layout::

    config.json  loss.csv  metrics.json  roc.csv  predictions.csv  checkpoint/
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .data import (
    DatasetManifest,
    compute_clinical_stats,
    load_case,
    normalize_clinical,
    split_folds,
    write_atomic,
)
from .glfe import EncoderConfig
from .metrics import Metrics, evaluate_metrics, summarize
from .model import DGSAN, ModelConfig, PretrainNet, variant_config

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 200
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_period: int = 20
    schedule_gamma: float = 0.5
    batch_size: int = 8
    seed: int = 0
    folds: int = 5
    float64: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.schedule_period < 1:
            raise ValueError("batch_size and schedule_period must be >= 1")

    @property
    def dtype(self):
        return torch.float64 if self.float64 else torch.float32

    def to_json(self) -> dict:
        return asdict(self)


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = torch.as_tensor(labels, device=logits.device)
    if logits.dim() != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match {labels.shape[0]} labels")
    if not ((labels == 0) | (labels == 1)).all():
        raise ValueError("labels must be 0 or 1")
    logp = torch.log_softmax(logits, dim=1)
    return -logp.gather(1, labels.long()[:, None]).mean()


def scheduled_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.schedule_gamma ** (epoch // config.schedule_period)


def init_optimizer_state(params) -> dict:
    params = list(params)
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


@torch.no_grad()
def optimizer_step(params, grads, state: dict, config: TrainConfig, epoch: int) -> dict:
    """One bias-corrected adaptive-moment update, in place.

    Raises :class:`NonFiniteGradientError` (nothing updated) if any gradient is
    not finite.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError("non-finite gradient; step rejected")
    state["step"] += 1
    t = state["step"]
    lr = scheduled_lr(config, epoch)
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = torch.zeros_like(p)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.eps))
    return state


# ---------------------------------------------------------------------------
# data


@dataclass
class TensorData:
    ids: List[str]
    t0: torch.Tensor
    t1: torch.Tensor
    clinical: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "TensorData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TensorData(
            [self.ids[i] for i in idx.tolist()],
            self.t0[idx], self.t1[idx], self.clinical[idx], self.labels[idx],
        )

    def to(self, dtype) -> "TensorData":
        return TensorData(self.ids, self.t0.to(dtype), self.t1.to(dtype), self.clinical.to(dtype), self.labels)


def load_tensors(manifest: DatasetManifest, ids: Optional[Sequence[str]] = None, stats=None) -> TensorData:
    """Materialize cases as stacked tensors; clinical vectors use ``stats``."""
    ids = list(ids) if ids is not None else manifest.ids()
    stats = stats if stats is not None else manifest.normalization_stats
    t0, t1, clin, labels = [], [], [], []
    for cid in ids:
        case = load_case(manifest, cid)
        t0.append(case.volumes.t0)
        t1.append(case.volumes.t1)
        clin.append(normalize_clinical(case.clinical, stats))
        labels.append(case.label)
    shape = (0, 16, 64, 64)
    return TensorData(
        ids,
        torch.from_numpy(np.stack(t0)) if t0 else torch.zeros(shape),
        torch.from_numpy(np.stack(t1)) if t1 else torch.zeros(shape),
        torch.from_numpy(np.stack(clin)) if clin else torch.zeros((0, 6)),
        torch.tensor(labels, dtype=torch.long),
    )


def manifest_tensors(manifest: DatasetManifest, ids, stats) -> TensorData:
    """Tensors for ``ids``; normalized volumes are read once and cached on the manifest."""
    cache = manifest.__dict__.setdefault("_volume_cache", {})
    missing = [c for c in ids if c not in cache]
    for cid in missing:
        case = load_case(manifest, cid)
        cache[cid] = (torch.from_numpy(case.volumes.t0), torch.from_numpy(case.volumes.t1))
    ids = list(ids)
    if not ids:
        return load_tensors(manifest, [], stats)
    clin = np.stack([normalize_clinical(manifest.entry(c).clinical, stats) for c in ids])
    return TensorData(
        ids,
        torch.stack([cache[c][0] for c in ids]),
        torch.stack([cache[c][1] for c in ids]),
        torch.from_numpy(clin),
        torch.tensor([manifest.entry(c).label for c in ids], dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# training


def _seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def train_model(model: nn.Module, data: TensorData, config: TrainConfig, run_dir=None) -> List[float]:
    """Minibatch training with :func:`cross_entropy` and :func:`optimizer_step`.

    Returns per-epoch mean training loss; with ``run_dir`` also writes loss.csv.
    """
    gen = torch.Generator().manual_seed(config.seed + 7919)
    data = data.to(config.dtype)
    params = [p for p in model.parameters() if p.requires_grad]
    state = init_optimizer_state(params)
    history = []
    n = len(data)
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        total, skipped = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = model(data.t0[idx], data.t1[idx], data.clinical[idx])
            loss = cross_entropy(logits, data.labels[idx])
            model.zero_grad(set_to_none=True)
            loss.backward()
            try:
                optimizer_step(params, [p.grad for p in params], state, config, epoch)
            except NonFiniteGradientError:
                skipped += 1
                log.warning("epoch %d: non-finite gradient, step skipped", epoch)
            total += loss.item() * len(idx)
        history.append(total / n)
        log.info("epoch %d loss %.6f lr %.3g", epoch, history[-1], scheduled_lr(config, epoch))
        if run_dir is not None:
            write_loss_csv(Path(run_dir) / "loss.csv", history)
    return history


def write_loss_csv(path: Path, history: List[float]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(history):
        w.writerow([i, f"{v:.8f}"])
    _atomic_write(path, buf.getvalue())


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(path, text.encode())


@torch.no_grad()
def predict(model: nn.Module, data: TensorData, batch_size: int = 16) -> np.ndarray:
    """Probability of the malignant class for every case."""
    model.eval()
    dtype = next(model.parameters()).dtype
    data = data.to(dtype)
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        logits = model(data.t0[sl], data.t1[sl], data.clinical[sl])
        out.append(torch.softmax(logits, dim=1)[:, 1])
    if not out:
        return np.zeros(0)
    return torch.cat(out).double().numpy()


def _run_config(kind, model_cfg, train_cfg, stats, extra=None) -> dict:
    cfg = {"kind": kind, "train": train_cfg.to_json(), "normalization_stats": stats}
    if kind == "glfe":
        cfg["encoder"] = asdict(model_cfg)
    else:
        cfg["model"] = model_cfg.to_json()
        cfg["encoder"] = asdict(model_cfg.encoder)
        cfg["fusion"] = asdict(model_cfg.fusion)
    cfg.update(extra or {})
    return cfg


def _check_classes(labels):
    counts = np.bincount(np.asarray(labels), minlength=2)
    if counts.min() < 1:
        raise ValueError(f"training data has an empty class (counts {counts.tolist()})")
    return counts


def pretrain_glfe(
    manifest: DatasetManifest,
    encoder_config: Optional[EncoderConfig] = None,
    train_config: Optional[TrainConfig] = None,
    out_dir=None,
    ids=None,
):
    """Train the encoder with a temporary head; returns (net, loss history)."""
    encoder_config = encoder_config or EncoderConfig()
    train_config = train_config or TrainConfig()
    ids = list(ids) if ids is not None else manifest.ids()
    labels = [manifest.entry(c).label for c in ids]
    counts = _check_classes(labels)
    if counts.min() < 2:
        raise ValueError("pretraining needs at least 2 cases per class")
    stats = compute_clinical_stats([manifest.entry(c).clinical for c in ids])
    data = manifest_tensors(manifest, ids, stats)
    _seed_everything(train_config.seed)
    net = PretrainNet(encoder_config).to(train_config.dtype)
    history = train_model(net, data, train_config, out_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        cfg = _run_config("glfe", encoder_config, train_config, stats)
        _atomic_write(out_dir / "config.json", json.dumps(cfg, indent=2))
        ckpt.save_checkpoint(out_dir / "checkpoint", net, cfg)
    return net, history


def _glfe_ckpt_dir(path) -> Path:
    path = Path(path)
    return path / "checkpoint" if (path / "checkpoint" / "index.json").exists() else path


def train_dgsan(
    manifest: DatasetManifest,
    glfe_checkpoint=None,
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
    out_dir=None,
    ids=None,
):
    """End-to-end training, optionally warm-starting the encoder; returns (model, history)."""
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    ids = list(ids) if ids is not None else manifest.ids()
    _check_classes([manifest.entry(c).label for c in ids])
    stats = compute_clinical_stats([manifest.entry(c).clinical for c in ids])
    data = manifest_tensors(manifest, ids, stats)
    _seed_everything(train_config.seed)
    model = DGSAN(model_config)
    if glfe_checkpoint is not None:
        ckpt.load_state(model.glfe, _glfe_ckpt_dir(glfe_checkpoint), prefix="glfe.")
    model = model.to(train_config.dtype)
    history = train_model(model, data, train_config, out_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        extra = {"warm_start": str(glfe_checkpoint) if glfe_checkpoint else None}
        cfg = _run_config("dgsan", model_config, train_config, stats, extra)
        _atomic_write(out_dir / "config.json", json.dumps(cfg, indent=2))
        ckpt.save_checkpoint(out_dir / "checkpoint", model, cfg)
    return model, history


def load_model(checkpoint_dir):
    """Rebuild a trained network from a checkpoint directory (or its run directory)."""
    path = _glfe_ckpt_dir(checkpoint_dir)
    cfg = ckpt.read_config(path)
    if cfg["kind"] == "glfe":
        model = PretrainNet(EncoderConfig(**cfg["encoder"]))
    else:
        model = DGSAN(ModelConfig.from_json(cfg["model"]))
    ckpt.load_state(model, path)
    return model, cfg


def write_eval_outputs(out_dir, metrics: Metrics, ids, scores, labels) -> None:
    out_dir = Path(out_dir)
    _atomic_write(out_dir / "metrics.json", metrics.dumps() + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr"])
    for fpr, tpr in metrics.roc:
        w.writerow([f"{fpr:.6f}", f"{tpr:.6f}"])
    _atomic_write(out_dir / "roc.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "score", "label"])
    for cid, s, y in zip(ids, scores, labels):
        w.writerow([cid, f"{s:.8f}", int(y)])
    _atomic_write(out_dir / "predictions.csv", buf.getvalue())


def evaluate(model: nn.Module, manifest: DatasetManifest, stats, ids=None, threshold=0.5, out_dir=None):
    """Score cases and compute metrics; returns (metrics, ids, scores, labels)."""
    ids = list(ids) if ids is not None else manifest.ids()
    data = manifest_tensors(manifest, ids, stats)
    scores = predict(model, data)
    labels = data.labels.numpy()
    metrics = evaluate_metrics(scores, labels, threshold)
    if out_dir is not None:
        write_eval_outputs(out_dir, metrics, ids, scores, labels)
    return metrics, ids, scores, labels


def evaluate_checkpoint(checkpoint_dir, manifest: DatasetManifest, out_dir=None, threshold=0.5):
    model, cfg = load_model(checkpoint_dir)
    return evaluate(model, manifest, cfg["normalization_stats"], threshold=threshold, out_dir=out_dir)


# ---------------------------------------------------------------------------
# cross-validation and ablation


def run_cross_validation(
    manifest: DatasetManifest,
    k: int = 5,
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
    out_dir=None,
    glfe_checkpoint=None,
    threshold: float = 0.5,
) -> dict:
    """Train on k-1 folds, score the held-out fold, for every fold.

    Returns ``{"folds": [...], "summary": {...}, "predictions": {id: score}}``.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    split = split_folds(manifest, k, train_config.seed)
    rows, predictions = [], {}
    fold_json = []
    for fold in range(k):
        run_dir = Path(out_dir) / f"fold{fold}" if out_dir is not None else None
        cfg = TrainConfig(**{**train_config.to_json(), "seed": train_config.seed + fold})
        train_ids = split.train_ids(fold)
        model, history = train_dgsan(manifest, glfe_checkpoint, model_config, cfg, run_dir, train_ids)
        stats = compute_clinical_stats([manifest.entry(c).clinical for c in train_ids])
        metrics, ids, scores, _ = evaluate(model, manifest, stats, split.fold_ids(fold), threshold, run_dir)
        rows.append(metrics)
        predictions.update(zip(ids, scores.tolist()))
        fold_json.append({"fold": fold, **metrics.to_json(), "final_loss": history[-1]})
        log.info("fold %d: %s", fold, metrics.to_json())
    result = {"folds": fold_json, "summary": summarize(rows), "predictions": predictions}
    if out_dir is not None:
        _atomic_write(Path(out_dir) / "cv.json", json.dumps(result, indent=2))
    return result


def _ablation_job(args):
    manifest, variant, model_config, train_config, train_ids, test_ids, run_dir, glfe_checkpoint = args
    torch.set_num_threads(1)
    cfg = variant_config(model_config, variant)
    model, _ = train_dgsan(manifest, glfe_checkpoint, cfg, train_config, run_dir, train_ids)
    stats = compute_clinical_stats([manifest.entry(c).clinical for c in train_ids])
    metrics, *_ = evaluate(model, manifest, stats, test_ids, out_dir=run_dir)
    return variant, metrics


def ablation_split(manifest: DatasetManifest, train_config: TrainConfig):
    """(train ids, held-out ids) used by ``run_ablation``."""
    split = split_folds(manifest, train_config.folds, train_config.seed)
    return split.train_ids(0), split.fold_ids(0)


def run_ablation(
    manifest: DatasetManifest,
    variants: Sequence[str],
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
    out_dir=None,
    jobs: int = 1,
    glfe_checkpoint=None,
) -> Dict[str, Metrics]:
    """One metrics row per variant, all trained and scored on the same split.

    The held-out set is fold 0 of a stratified ``train_config.folds`` split
    (``ablation_split`` gives the same ids). Every variant starts from
    ``glfe_checkpoint`` when one is given.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    for v in variants:
        variant_config(model_config, v)
    train_ids, test_ids = ablation_split(manifest, train_config)
    jobs_args = [
        (manifest, v, model_config, train_config, train_ids, test_ids,
         Path(out_dir) / v.replace(":", "_") if out_dir is not None else None, glfe_checkpoint)
        for v in variants
    ]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = dict(pool.map(_ablation_job, jobs_args))
    else:
        results = dict(map(_ablation_job, jobs_args))
    table = {v: results[v] for v in variants}
    if out_dir is not None:
        _atomic_write(
            Path(out_dir) / "ablation.json",
            json.dumps({v: m.to_json() for v, m in table.items()}, indent=2),
        )
    return table
