"""Checkpoint evaluation, zero-shot suites, reference rows and qualitative panels."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .data import DEFAULT_RESOLUTION, DatasetManifest, ImageSample, SampleSet, load_manifest, load_split
from .errors import ContaminationError, OutputError, ParameterError
from .metrics import (
    DEFAULT_TAU,
    Aggregate,
    ConfusionCounts,
    MetricValues,
    aggregate,
    binarize,
    compute_metrics,
    confusion,
    metrics_csv,
)
from .primitives import ToySegmenter

EVAL_SPLITS = ("test", "zeroshot")
OVERLAY_ALPHA = 0.5
OVERLAY_HUE = (1.0, 0.0, 0.0)
PANES = ("input", "groundtruth", "probability", "overlay", "binary")

Predictor = Union[ToySegmenter, Callable[[np.ndarray], np.ndarray], str, Path]
Split = Union[SampleSet, DatasetManifest, str, Path]


@dataclass
class LoadedModel:
    predict: Callable[[np.ndarray], np.ndarray]
    input_size: int
    name: str
    plan: str


def load_model(model: Predictor, name: Optional[str] = None, plan: Optional[str] = None,
               input_size: int = DEFAULT_RESOLUTION) -> LoadedModel:
    """Wrap a checkpoint path, a toy segmenter or a plain callable for inference.

    A callable receives ``N x H x W x 3`` float images and returns ``N x H x W``
    probabilities; it sees images at ``input_size``.
    """
    if isinstance(model, (str, Path)):
        from .training import load_checkpoint

        model = load_checkpoint(model)
    if isinstance(model, ToySegmenter):
        tuned = getattr(model, "tuning_plan", None)
        return LoadedModel(
            model.predict,
            model.spec.input_size,
            name or "toy-segmenter",
            plan or (tuned.label() if tuned is not None else "none"),
        )
    if not callable(model):
        raise ParameterError(f"cannot evaluate a {type(model).__name__}")
    return LoadedModel(lambda x: np.asarray(model(x)), input_size, name or getattr(model, "__name__", "callable"),
                       plan or "-")


def _samples(data: Split, size: int) -> SampleSet:
    if isinstance(data, SampleSet):
        return data
    if isinstance(data, (str, Path)):
        data = load_manifest(data)
    return load_split(data, size)


def _split_of(data: Split) -> str:
    if isinstance(data, (SampleSet, DatasetManifest)):
        return data.split
    return load_manifest(data).split


@dataclass(frozen=True)
class MetricReport:
    dataset: str
    model: str
    plan: str
    counts: ConfusionCounts
    values: MetricValues
    n_images: int
    tau: float

    def row(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "plan": self.plan,
            "precision": self.values.precision,
            "recall": self.values.recall,
            "f1": self.values.f1,
            "iou": self.values.iou,
        }

    def to_csv(self) -> str:
        return metrics_csv([self.row()])


def reports_csv(reports: Sequence[MetricReport]) -> str:
    return metrics_csv([r.row() for r in reports])


def evaluate_dataset(
    model: Predictor,
    data: Split,
    tau: float = DEFAULT_TAU,
    model_name: Optional[str] = None,
    plan_name: Optional[str] = None,
    batch_size: int = 16,
) -> MetricReport:
    """Run inference over every sample and score the pooled confusion counts."""
    loaded = model if isinstance(model, LoadedModel) else load_model(model, model_name, plan_name)
    samples = _samples(data, loaded.input_size)
    if len(samples) == 0:
        raise ParameterError(f"dataset {samples.name!r} is empty")
    counts = ConfusionCounts(0, 0, 0, 0)
    for start in range(0, len(samples), batch_size):
        probs = loaded.predict(samples.images[start:start + batch_size])
        for pred, gt in zip(binarize(probs, tau), samples.masks[start:start + batch_size]):
            counts = counts + confusion(pred, gt)
    return MetricReport(samples.name, loaded.name, loaded.plan, counts, compute_metrics(counts), len(samples), tau)


@dataclass
class ZeroShotReport:
    reports: list
    summary: Aggregate

    def table(self, digits: int = 2) -> str:
        """One-line table: per-dataset F1 and IoU, then mean and std of each."""
        head = ["Model"] + [f"{r.dataset} F1" for r in self.reports] + [f"{r.dataset} IoU" for r in self.reports]
        head += ["F1 mean±std", "IoU mean±std"]
        name = self.reports[0].model
        cells = [name]
        cells += [f"{100 * r.values.f1:.{digits}f}" for r in self.reports]
        cells += [f"{100 * r.values.iou:.{digits}f}" for r in self.reports]
        s = self.summary
        cells += [f"{100 * s.f1_mean:.{digits}f}±{100 * s.f1_std:.{digits}f}",
                  f"{100 * s.iou_mean:.{digits}f}±{100 * s.iou_std:.{digits}f}"]
        return " | ".join(head) + "\n" + " | ".join(cells) + "\n"

    def to_csv(self) -> str:
        """Per-dataset rows followed by ``mean`` and ``std`` rows (F1 and IoU only)."""
        buf = io.StringIO(reports_csv(self.reports))
        buf.seek(0, io.SEEK_END)
        writer = csv.writer(buf, lineterminator="\n")
        model, plan = self.reports[0].model, self.reports[0].plan
        s = self.summary
        writer.writerow(["mean", model, plan, "", "", f"{100 * s.f1_mean:.2f}", f"{100 * s.iou_mean:.2f}"])
        writer.writerow(["std", model, plan, "", "", f"{100 * s.f1_std:.2f}", f"{100 * s.iou_std:.2f}"])
        return buf.getvalue()


def check_not_training_data(datasets: Sequence[Split]):
    for d in datasets:
        split = _split_of(d)
        if split not in EVAL_SPLITS:
            label = str(d) if isinstance(d, (str, Path)) else d.name
            raise ContaminationError(f"{label} is a {split!r} split; only {EVAL_SPLITS} may be evaluated")


def zero_shot_suite(
    model: Predictor,
    datasets: Sequence[Split],
    tau: float = DEFAULT_TAU,
    model_name: Optional[str] = None,
    plan_name: Optional[str] = None,
) -> ZeroShotReport:
    """Evaluate on two or more held-out datasets and aggregate F1/IoU across them."""
    if len(datasets) < 2:
        raise ParameterError("a zero-shot suite needs at least two datasets")
    check_not_training_data(datasets)
    loaded = model if isinstance(model, LoadedModel) else load_model(model, model_name, plan_name)
    reports = [evaluate_dataset(loaded, d, tau) for d in datasets]
    return ZeroShotReport(reports, aggregate([(r.dataset, r.values) for r in reports]))


@dataclass
class EvalJob:
    checkpoint: Path
    datasets: list
    tau: float = DEFAULT_TAU
    out_dir: Optional[Path] = None

    def __post_init__(self):
        if not self.datasets:
            raise ParameterError("an eval job needs at least one dataset")
        check_not_training_data(self.datasets)

    def run(self) -> Union[MetricReport, ZeroShotReport]:
        if len(self.datasets) == 1:
            report = evaluate_dataset(self.checkpoint, self.datasets[0], self.tau)
        else:
            report = zero_shot_suite(self.checkpoint, self.datasets, self.tau)
        if self.out_dir is not None:
            write_text(Path(self.out_dir) / "metrics.csv", report.to_csv())
        return report


def write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


# -- reference rows -------------------------------------------------------------


def reference_rows() -> dict:
    """Published full-scale numbers, for side-by-side reading only."""
    text = resources.files("sackit.resources").joinpath("reference_rows.json").read_text()
    return json.loads(text)


def reference_aggregate(row: dict) -> Aggregate:
    """Recompute a published zero-shot row's mean and population std from its cells."""
    names = reference_rows()["zeroshot_datasets"]
    values = [(n, MetricValues(float("nan"), float("nan"), f, i)) for n, f, i in zip(names, row["f1"], row["iou"])]
    return aggregate(values)


# -- qualitative panels -------------------------------------------------------


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def render_panes(image: np.ndarray, mask: np.ndarray, prob: np.ndarray, tau: float = DEFAULT_TAU) -> dict:
    """The five uint8 panes for one sample, all at the image's resolution."""
    image = np.asarray(image, dtype=np.float64)
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != image.shape[:2] or mask.shape != image.shape[:2]:
        raise ParameterError(f"panes disagree in size: image {image.shape}, mask {mask.shape}, prob {prob.shape}")
    gray = image @ np.array([0.299, 0.587, 0.114])
    weight = OVERLAY_ALPHA * prob[..., None]
    overlay = (1.0 - weight) * gray[..., None] + weight * np.asarray(OVERLAY_HUE)
    return {
        "input": _to_u8(image),
        "groundtruth": (np.asarray(mask) > 0).astype(np.uint8) * 255,
        "probability": _to_u8(prob),
        "overlay": _to_u8(overlay),
        "binary": binarize(prob, tau) * 255,
    }


def _rgb(pane: np.ndarray) -> np.ndarray:
    return pane if pane.ndim == 3 else np.repeat(pane[..., None], 3, axis=2)


@dataclass
class PanelExport:
    panes: list = field(default_factory=list)
    rows: list = field(default_factory=list)


def export_qualitative(
    model: Predictor,
    samples: Union[SampleSet, Sequence[ImageSample]],
    tau: float = DEFAULT_TAU,
    out_dir=".",
) -> PanelExport:
    """Write five PNG panes per sample plus a side-by-side row image.

    Files are named ``{index:03d}_{id}_{pane}.png`` and ``{index:03d}_{id}_row.png``.
    """
    if not isinstance(samples, SampleSet):
        samples = SampleSet.from_samples(list(samples))
    loaded = model if isinstance(model, LoadedModel) else load_model(model)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc}") from exc
    probs = loaded.predict(samples.images) if len(samples) else []
    export = PanelExport()
    try:
        for i, (sid, image, mask, prob) in enumerate(zip(samples.ids, samples.images, samples.masks, probs)):
            stem = f"{i:03d}_{sid}" if sid else f"{i:03d}"
            panes = render_panes(image, mask, prob, tau)
            for name in PANES:
                path = out / f"{stem}_{name}.png"
                Image.fromarray(panes[name]).save(path)
                export.panes.append(path)
            row = np.concatenate([_rgb(panes[name]) for name in PANES], axis=1)
            path = out / f"{stem}_row.png"
            Image.fromarray(row).save(path)
            export.rows.append(path)
    except OSError as exc:
        raise OutputError(f"cannot write panels to {out}: {exc}") from exc
    return export
