"""Fine-tuning loop: AdamW over the plan's trainables, cosine schedule, F1 checkpointing."""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .data import DatasetManifest, SampleSet, load_manifest, load_split
from .errors import ConfigurationError, LoadError, NonFiniteLossError, ParameterError, ScheduleError
from .losses import LossForm, hybrid_loss
from .metrics import DEFAULT_TAU, binarize, compute_metrics, pooled_counts
from .primitives import AffineNorm, ToySegmenter, ToySegmenterSpec, build_toy_segmenter
from .selection import TuningPlan, apply_plan, make_plan

CHECKPOINT_FORMAT = "sackit-checkpoint/1"


def cosine_lr(step: int, total: int, base: float) -> float:
    """``base * (1 + cos(pi * step / total)) / 2``, no warmup, never negative."""
    if total <= 0:
        raise ScheduleError(f"schedule length must be positive, got {total}")
    if not 0 <= step <= total:
        raise ScheduleError(f"step {step} outside schedule [0, {total}]")
    return max(0.0, base * 0.5 * (1.0 + math.cos(math.pi * step / total)))


@dataclass
class TrainConfig:
    epochs: int = 4
    lr: float = 5e-4
    batch_size: int = 2
    weight_decay: float = 5e-5
    seed: int = 0
    tau: float = DEFAULT_TAU
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    update_bn_stats: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigurationError("lr and batch size must be positive, weight decay non-negative")
        if not 0 < self.tau < 1:
            raise ConfigurationError("tau must lie in (0, 1)")


@dataclass
class TrainingHistory:
    step_losses: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_state: Optional[dict] = None
    checkpoint: Optional[Path] = None

    @property
    def best_f1(self) -> Optional[float]:
        return None if self.best_epoch is None else self.val_f1[self.best_epoch]


Data = Union[SampleSet, DatasetManifest, str, Path]


def _as_samples(data: Data, size: int) -> SampleSet:
    if isinstance(data, SampleSet):
        return data
    if isinstance(data, (str, Path)):
        data = load_manifest(data)
    return load_split(data, size)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)


def _set_bn_update(model: torch.nn.Module, update: bool):
    for m in model.modules():
        if isinstance(m, AffineNorm):
            m.update_running_stats = update


def predict(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Probability maps from a toy segmenter or any callable on ``N x H x W x 3`` arrays."""
    if hasattr(model, "predict"):
        return model.predict(images, batch_size)
    return np.asarray(model(images))


def validate(model, data: Data, tau: float = DEFAULT_TAU) -> float:
    """Micro-averaged F1 over the split at threshold ``tau``; the model is not modified."""
    size = model.spec.input_size if hasattr(model, "spec") else None
    samples = _as_samples(data, size) if size else data
    if len(samples) == 0:
        raise ParameterError("validation data is empty")
    probs = predict(model, samples.images)
    return compute_metrics(pooled_counts(binarize(probs, tau), samples.masks)).f1


def train(
    model: ToySegmenter,
    plan: TuningPlan,
    loss: LossForm,
    train_data: Data,
    val_data: Data,
    config: TrainConfig,
    checkpoint_path=None,
    log=None,
) -> TrainingHistory:
    """Fine-tune ``model`` in place under ``plan``.

    Only the plan's parameters reach the optimizer. Validation F1 is recorded
    after each epoch and the best epoch (earliest on ties) is kept in
    ``history.best_state`` and, if ``checkpoint_path`` is given, written there.
    """
    history = TrainingHistory()
    if config.epochs == 0:
        return history
    size = model.spec.input_size
    train_set = _as_samples(train_data, size)
    val_set = _as_samples(val_data, size)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ParameterError("train and validation splits must be non-empty")

    trainable = set(apply_plan(model, plan, seed=config.seed))
    params = [p for n, p in model.named_parameters() if n in trainable]
    if not params and plan.strategy != "none":
        raise ConfigurationError(f"plan {plan.label()} selects no parameters on this model")
    optimizer = None
    if params:
        optimizer = torch.optim.AdamW(
            params, lr=config.lr, betas=config.betas, eps=config.adam_eps, weight_decay=config.weight_decay
        )

    rng = np.random.default_rng(config.seed)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    best = -1.0
    for epoch in range(config.epochs):
        t_epoch = time.perf_counter()
        # nothing trainable: run in eval mode so no buffer moves either
        model.train(optimizer is not None)
        _set_bn_update(model, config.update_bn_stats)
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            t_step = time.perf_counter()
            idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
            lr = cosine_lr(step, total_steps, config.lr)
            x = _to_tensor(train_set.images[idx])
            y = torch.from_numpy(train_set.masks[idx].astype(np.float32))
            with torch.set_grad_enabled(optimizer is not None):
                value = hybrid_loss(loss, model(x), y)
            if not torch.isfinite(value):
                raise NonFiniteLossError(step, lr, [train_set.ids[i] for i in idx], float(value.detach()))
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                value.backward()
                optimizer.step()
            history.step_losses.append(value.item())
            history.step_seconds.append(time.perf_counter() - t_step)
            step += 1

        f1 = validate(model, val_set, config.tau)
        history.val_f1.append(f1)
        history.epoch_seconds.append(time.perf_counter() - t_epoch)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs}  loss {np.mean(history.step_losses[-steps_per_epoch:]):.4f}  val F1 {f1:.4f}")
        if f1 > best:
            best = f1
            history.best_epoch = epoch
            history.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if checkpoint_path is not None:
                history.checkpoint = save_checkpoint(
                    model, checkpoint_path, plan, meta={"epoch": epoch, "val_f1": f1, "loss": loss.to_dict()}
                )
    model.eval()
    return history


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(model: ToySegmenter, path, plan: Optional[TuningPlan] = None, meta: Optional[dict] = None) -> Path:
    """Write the parameter map and plan metadata atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plan = plan or getattr(model, "tuning_plan", None) or make_plan("none")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_spec": model.spec.to_dict(),
        "plan": plan.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> ToySegmenter:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    except Exception as exc:  # unpickling failures surface as assorted types
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not a sackit checkpoint")
    model = build_toy_segmenter(ToySegmenterSpec.from_dict(payload["model_spec"]))
    plan = TuningPlan.from_dict(payload["plan"])
    if plan.uses_lora:
        apply_plan(model, plan)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise LoadError(f"{path}: parameters do not match the recorded model: {exc}") from exc
    model.tuning_plan = plan
    model.checkpoint_meta = payload.get("meta", {})
    model.eval()
    return model


# -- config files -----------------------------------------------------------------


@dataclass
class TrainJob:
    model_spec: ToySegmenterSpec
    model_seed: int
    plan: TuningPlan
    loss: LossForm
    config: TrainConfig
    train_manifest: Path
    val_manifest: Path
    checkpoint: Path
    init_checkpoint: Optional[Path] = None


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_train_config(path) -> TrainJob:
    """Parse a JSON training config.

    Keys: ``plan``, ``loss``, ``epochs``, ``lr``, ``batch``, ``weight_decay``,
    ``seed``, ``tau``, ``manifests`` (``train``/``val``), and optionally
    ``model`` (toy segmenter spec), ``model_seed``, ``checkpoint`` and
    ``init_checkpoint`` (start from saved weights). Paths are relative to the
    config file.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not valid JSON ({exc})") from exc
    base = path.parent
    try:
        manifests = doc["manifests"]
        config = TrainConfig(
            epochs=doc.get("epochs", 4),
            lr=doc.get("lr", 5e-4),
            batch_size=doc.get("batch", 2),
            weight_decay=doc.get("weight_decay", 5e-5),
            seed=doc.get("seed", 0),
            tau=doc.get("tau", DEFAULT_TAU),
            update_bn_stats=doc.get("update_bn_stats", True),
        )
        return TrainJob(
            model_spec=ToySegmenterSpec.from_dict(doc.get("model", {})),
            model_seed=doc.get("model_seed", 0),
            plan=TuningPlan.from_dict(doc["plan"]),
            loss=LossForm.from_dict(doc["loss"]),
            config=config,
            train_manifest=_resolve(base, manifests["train"]),
            val_manifest=_resolve(base, manifests["val"]),
            checkpoint=_resolve(base, doc.get("checkpoint", "checkpoint.pt")),
            init_checkpoint=_resolve(base, doc["init_checkpoint"]) if doc.get("init_checkpoint") else None,
        )
    except KeyError as exc:
        raise ConfigurationError(f"{path}: missing config key {exc}") from exc


def run_train_job(job: TrainJob, log=None) -> tuple[ToySegmenter, TrainingHistory]:
    if job.init_checkpoint is not None:
        model = load_checkpoint(job.init_checkpoint)
    else:
        model = build_toy_segmenter(job.model_spec, seed=job.model_seed)
    history = train(
        model, job.plan, job.loss, job.train_manifest, job.val_manifest, job.config, job.checkpoint, log=log
    )
    return model, history


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
