"""Grid enumeration, random trial sampling and validation-F1 model selection."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import BudgetError, ConfigurationError, LoadError, SearchError
from .losses import LossForm

LAMBDA_KINDS = ("convex_hybrid", "weighted_hybrid")


def expand_values(spec) -> list[float]:
    """Expand a value list that may contain ``"start:step:stop"`` ranges.

    Ranges include both endpoints when the stop is reached exactly, so
    ``"0.0001:0.0001:0.0005"`` gives five values. Decimal arithmetic keeps
    ``0.0003`` from turning into ``0.00030000000000000003``.
    """
    items = spec if isinstance(spec, (list, tuple)) else [spec]
    out: list[float] = []
    for item in items:
        if isinstance(item, str) and ":" in item:
            try:
                start, step, stop = (Decimal(part.strip()) for part in item.split(":"))
            except Exception as exc:
                raise ConfigurationError(f"bad range {item!r}; expected 'start:step:stop'") from exc
            if step <= 0 or stop < start:
                raise ConfigurationError(f"range {item!r} is empty or has a non-positive step")
            v = start
            while v <= stop:
                out.append(float(v))
                v += step
        elif isinstance(item, str) and "," in item:
            out.extend(expand_values([part for part in item.split(",") if part.strip()]))
        else:
            out.append(float(item))
    return out


@dataclass(frozen=True)
class TrialConfig:
    loss: LossForm
    lr: float
    batch_size: int

    def label(self) -> str:
        return f"{self.loss.label()} lr={self.lr:g} batch={self.batch_size}"


@dataclass
class SearchSpace:
    loss_kind: str
    lambda_values: list
    lr_values: list
    batch_values: list
    trial_epochs: int = 4
    fraction: Optional[float] = None
    trials: Optional[int] = None
    seed: int = 0
    reduction: str = "mean"

    def __post_init__(self):
        self.lr_values = expand_values(self.lr_values)
        self.batch_values = [int(b) for b in self.batch_values]
        if self.loss_kind in LAMBDA_KINDS:
            self.lambda_values = expand_values(self.lambda_values)
        else:
            self.lambda_values = [None]
        if self.fraction is None and self.trials is None:
            self.fraction = 1.0
        if self.fraction is not None:
            self.fraction = float(self.fraction)
        if self.trials is not None:
            self.trials = int(self.trials)
        if self.fraction is not None and self.trials is not None:
            raise ConfigurationError("give a fraction or a trial count, not both")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise BudgetError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.trials is not None and self.trials < 1:
            raise BudgetError("trial count must be >= 1")

    @property
    def budget(self) -> Union[float, int]:
        return self.fraction if self.trials is None else self.trials

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        try:
            return cls(
                loss_kind=doc["loss"],
                lambda_values=doc.get("lambda", [None]),
                lr_values=doc["lr"],
                batch_values=doc["batch"],
                trial_epochs=doc.get("epochs", 4),
                fraction=doc.get("fraction"),
                trials=doc.get("trials"),
                seed=doc.get("seed", 0),
                reduction=doc.get("reduction", "mean"),
            )
        except KeyError as exc:
            raise ConfigurationError(f"search space missing key {exc}") from exc


def enumerate_grid(space: SearchSpace) -> list[TrialConfig]:
    """Cartesian product of lambda x lr x batch, in that lexicographic order."""
    for name, values in (("lambda", space.lambda_values), ("lr", space.lr_values), ("batch", space.batch_values)):
        if not values:
            raise ConfigurationError(f"the {name} list is empty")
    return [
        TrialConfig(LossForm(space.loss_kind, lam, space.reduction), lr, batch)
        for lam, lr, batch in itertools.product(space.lambda_values, space.lr_values, space.batch_values)
    ]


def resolve_budget(budget: Union[float, int], grid_size: int) -> int:
    """A float is a fraction of the grid rounded up; an int is an exact count."""
    if isinstance(budget, float):
        if not 0 < budget <= 1:
            raise BudgetError(f"fraction must lie in (0, 1], got {budget}")
        # tolerate float noise such as 0.2 * 147 = 29.400000000000002
        return min(grid_size, math.ceil(round(budget * grid_size, 9)))
    if budget < 1 or budget > grid_size:
        raise BudgetError(f"cannot draw {budget} trials from a {grid_size}-point grid")
    return int(budget)


def sample_trials(grid: Sequence[TrialConfig], budget: Union[float, int], seed: int = 0) -> list[TrialConfig]:
    """Uniform sample without replacement; order is the sampling order."""
    k = resolve_budget(budget, len(grid))
    rng = np.random.default_rng(seed)
    return [grid[i] for i in rng.choice(len(grid), size=k, replace=False)]


@dataclass
class TrialResult:
    config: TrialConfig
    val_f1: Optional[float]
    history: object = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.val_f1 is None


@dataclass
class SearchResult:
    best: TrialResult
    trials: list = field(default_factory=list)


def run_search(
    space: SearchSpace,
    model_factory: Callable[[], object],
    train_data,
    val_data,
    template,
    trainer: Optional[Callable] = None,
    plan=None,
    out_dir=None,
    log=None,
) -> SearchResult:
    """Train one fresh model per sampled trial and keep the best validation F1.

    ``template`` is a :class:`~sackit.training.TrainConfig` whose lr, batch
    size and epoch count are overridden per trial. ``trainer`` defaults to
    :func:`sackit.training.train` and may be swapped for a stub with the same
    signature. A trial that raises is recorded as failed and skipped in the
    argmax; ties go to the earlier trial in sampling order.
    """
    from .selection import make_plan
    from .training import train

    trainer = trainer or train
    plan = plan or make_plan("norm_only")
    trials = sample_trials(enumerate_grid(space), space.budget, space.seed)
    results = []
    for i, cfg in enumerate(trials):
        config = replace(template, lr=cfg.lr, batch_size=cfg.batch_size, epochs=space.trial_epochs)
        model = model_factory()
        try:
            history = trainer(model, plan, cfg.loss, train_data, val_data, config)
            f1 = max(history.val_f1) if history.val_f1 else None
            result = TrialResult(cfg, f1, history, None if f1 is not None else "no validation epochs")
        except Exception as exc:  # a diverging trial must not end the search
            result = TrialResult(cfg, None, None, f"{type(exc).__name__}: {exc}")
        results.append(result)
        if log:
            shown = "failed" if result.failed else f"{result.val_f1:.4f}"
            log(f"trial {i + 1}/{len(trials)}  {cfg.label()}  val F1 {shown}")

    scored = [r for r in results if not r.failed]
    if not scored:
        raise SearchError(f"all {len(results)} trials failed")
    best = scored[0]
    for r in scored[1:]:
        if r.val_f1 > best.val_f1:
            best = r
    if out_dir is not None:
        write_trials_csv(results, Path(out_dir) / "trials.csv")
        for i, r in enumerate(results):
            _write_trial_history(r, Path(out_dir) / f"trial_{i:03d}.json")
    return SearchResult(best, results)


TRIAL_FIELDS = ("trial", "loss", "lambda", "lr", "batch", "val_f1", "error")


def write_trials_csv(results: Sequence[TrialResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_FIELDS)
        for i, r in enumerate(results):
            c = r.config
            writer.writerow([
                i,
                c.loss.kind,
                "" if c.loss.lam is None else f"{c.loss.lam:g}",
                f"{c.lr:g}",
                c.batch_size,
                "" if r.failed else f"{r.val_f1:.6f}",
                r.error or "",
            ])
    return path


def _write_trial_history(result: TrialResult, path: Path):
    h = result.history
    doc = {
        "config": {"loss": result.config.loss.to_dict(), "lr": result.config.lr, "batch": result.config.batch_size},
        "val_f1": result.val_f1,
        "error": result.error,
        "history": None if h is None else {
            "val_f1": list(getattr(h, "val_f1", [])),
            "step_losses": list(getattr(h, "step_losses", [])),
            "epoch_seconds": list(getattr(h, "epoch_seconds", [])),
        },
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_search_space(path) -> tuple[SearchSpace, dict]:
    """Read a search file; returns the space and the raw document (for run settings)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise LoadError(f"cannot read search space {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not valid JSON ({exc})") from exc
    return SearchSpace.from_dict(doc), doc


# The three grids of the loss/lr/batch study.
STUDY_GRIDS = {
    "config1": dict(loss="convex_hybrid", **{"lambda": [0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]},
                    lr=["0.0001:0.0001:0.0005", 0.001, 0.002], batch=[2, 4, 8], fraction=0.2),
    "config2": dict(loss="convex_hybrid", **{"lambda": [0]},
                    lr=["0.0001:0.0001:0.0005", 0.001, 0.002], batch=[2, 4, 8], fraction=0.2),
    "config3": dict(loss="weighted_hybrid", **{"lambda": ["0.5:0.05:0.95"]},
                    lr=["0.0005:0.0002:0.0014"], batch=[2, 4, 8], fraction=0.05),
}


def study_space(name: str, **overrides) -> SearchSpace:
    doc = dict(STUDY_GRIDS[name])
    doc.update(overrides)
    return SearchSpace.from_dict(doc)
