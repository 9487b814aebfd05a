"""End-to-end desk-scale run: synthetic cracks, norm-only tuning, test report."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import load_split, synth_crack_dataset
from .evaluation import MetricReport, evaluate_dataset
from .losses import LossForm
from .primitives import ToySegmenterSpec, build_toy_segmenter
from .selection import TuningPlan, make_plan, selected_parameter_names
from .training import TrainConfig, TrainingHistory, load_checkpoint, train, validate

DESK_SEEDS = {"train": 7, "val": 8, "test": 9}
DESK_SIZES = {"train": 200, "val": 50, "test": 50}


@dataclass
class DeskRun:
    untrained_f1: float
    history: TrainingHistory
    report: MetricReport
    trainable_fraction: float
    n_params: int

    @property
    def gain(self) -> float:
        return self.history.best_f1 - self.untrained_f1

    @property
    def csv(self) -> str:
        return self.report.to_csv()


def make_desk_data(out_dir, resolution: int = 64, sizes=None, seeds=None) -> dict:
    """Write train/val/test synthetic splits under ``out_dir``; returns their manifests."""
    sizes = {**DESK_SIZES, **(sizes or {})}
    seeds = {**DESK_SEEDS, **(seeds or {})}
    out = Path(out_dir)
    return {
        split: synth_crack_dataset(sizes[split], resolution, seeds[split], out / split, name=f"synth-{split}", split=split)
        for split in ("train", "val", "test")
    }


def desk_scale_run(
    out_dir,
    plan: TuningPlan = None,
    loss: LossForm = None,
    config: TrainConfig = None,
    model_seed: int = 0,
    spec: ToySegmenterSpec = None,
    log=None,
) -> DeskRun:
    """Tune the toy segmenter on synthetic cracks and score the best checkpoint.

    Defaults: norm-only plan, BCE + 0.65 Dice, lr 5e-4, batch 2, 10 epochs.
    """
    plan = plan or make_plan("norm_only")
    loss = loss or LossForm("weighted_hybrid", 0.65)
    config = config or TrainConfig(epochs=10, lr=5e-4, batch_size=2)
    spec = spec or ToySegmenterSpec()
    out = Path(out_dir)
    manifests = make_desk_data(out / "data", spec.input_size)
    train_set = load_split(manifests["train"], spec.input_size)
    val_set = load_split(manifests["val"], spec.input_size)

    model = build_toy_segmenter(spec, seed=model_seed)
    untrained = validate(model, val_set, config.tau)
    n_params = sum(p.numel() for p in model.parameters())
    selected = selected_parameter_names(model, plan)
    n_selected = sum(p.numel() for n, p in model.named_parameters() if n in selected)

    history = train(model, plan, loss, train_set, val_set, config, out / "best.pt", log=log)
    best = load_checkpoint(history.checkpoint)
    report = evaluate_dataset(best, manifests["test"], config.tau)
    return DeskRun(untrained, history, report, n_selected / n_params, n_params)
