"""Tuning plans, trainable-set selection and parameter-budget audits.

A *parameter group* is either one parameter tensor or the (gamma, beta) pair
of one normalization layer, stored with shape ``[2, C]``. Groups carry tags
that plans select on.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from .errors import AuditError, ConfigurationError, LoadError, SelectionError
from .primitives import AffineNorm, LoRALinear, lora_param_count

COMPONENT_TAGS = ("encoder", "decoder", "prompt-encoder")
NORM_TAGS = ("norm-layer", "norm-batch", "norm-group")
ROLE_TAGS = ("attention-qkv", "mlp-linear2")
_BLOCK_TAG = re.compile(r"^block:(\d+)$")

STRATEGIES = ("norm_only", "decoder_only", "lora", "full", "composite_cracksam", "none")
LORA_STRATEGIES = ("lora", "composite_cracksam")


def _check_tag(tag: str):
    if tag in COMPONENT_TAGS or tag in NORM_TAGS or tag in ROLE_TAGS or _BLOCK_TAG.match(tag):
        return
    raise ConfigurationError(f"unknown tag {tag!r}")


@dataclass(frozen=True)
class ParamGroup:
    name: str
    shape: tuple
    tags: frozenset

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "tags", frozenset(self.tags))
        for tag in self.tags:
            _check_tag(tag)
        if len(self.tags & set(NORM_TAGS)) > 1:
            raise ConfigurationError(f"group {self.name!r} carries more than one norm tag")

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def block(self) -> Optional[int]:
        for tag in self.tags:
            m = _BLOCK_TAG.match(tag)
            if m:
                return int(m.group(1))
        return None

    @property
    def is_norm(self) -> bool:
        return bool(self.tags & set(NORM_TAGS))


@dataclass
class ArchitectureSpec:
    name: str
    groups: list[ParamGroup]
    total_params: Optional[int] = None

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigurationError(f"duplicate group names: {dupes}")
        if self.total_params is not None:
            summed = self.summed_params
            if abs(summed - self.total_params) > 0.01 * self.total_params:
                raise ConfigurationError(
                    f"{self.name}: declared {self.total_params} params but groups sum to {summed}"
                )

    @property
    def summed_params(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def total(self) -> int:
        return self.summed_params

    def tags(self) -> set:
        return set().union(*(g.tags for g in self.groups)) if self.groups else set()

    def with_tag(self, tag: str) -> list[ParamGroup]:
        return [g for g in self.groups if tag in g.tags]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "total_params": self.total_params,
            "groups": [{"name": g.name, "shape": list(g.shape), "tags": sorted(g.tags)} for g in self.groups],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureSpec":
        try:
            groups = [ParamGroup(g["name"], g["shape"], g.get("tags", ())) for g in doc["groups"]]
            return cls(doc["name"], groups, doc.get("total_params"))
        except KeyError as exc:
            raise ConfigurationError(f"architecture spec missing field {exc}") from exc


def load_architecture(path) -> ArchitectureSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise LoadError(f"cannot read architecture spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not valid JSON ({exc})") from exc
    return ArchitectureSpec.from_dict(doc)


def save_architecture(spec: ArchitectureSpec, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return path


def sam_vit_b_spec() -> ArchitectureSpec:
    """The public SAM ViT-B layout: image encoder, prompt encoder, mask decoder."""
    text = resources.files("sackit.resources").joinpath("sam_vit_b.json").read_text()
    return ArchitectureSpec.from_dict(json.loads(text))


# -- plans ------------------------------------------------------------------------


@dataclass(frozen=True)
class TuningPlan:
    strategy: str
    lora_rank: Optional[int] = None
    lora_targets: tuple = ()
    last_k_blocks: Optional[int] = None
    include_prompt_encoder: bool = False

    @property
    def uses_lora(self) -> bool:
        return self.strategy in LORA_STRATEGIES

    def label(self) -> str:
        if self.strategy == "lora":
            where = f"last {self.last_k_blocks}" if self.last_k_blocks else "all"
            return f"lora[{'+'.join(self.lora_targets)}, {where} blocks, r={self.lora_rank}]"
        if self.strategy == "decoder_only" and self.include_prompt_encoder:
            return "decoder_only+prompt"
        return self.strategy

    def to_dict(self) -> dict:
        d = {"strategy": self.strategy}
        if self.uses_lora:
            d.update(rank=self.lora_rank, targets=list(self.lora_targets), last_k_blocks=self.last_k_blocks)
        if self.include_prompt_encoder:
            d["include_prompt_encoder"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TuningPlan":
        d = dict(d)
        return make_plan(d.pop("strategy"), **d)


def make_plan(strategy: str, **options) -> TuningPlan:
    """Build a validated plan.

    Options: ``rank`` (alias ``r``/``lora_rank``), ``targets`` (tags such as
    ``attention-qkv``), ``last_k_blocks`` and ``include_prompt_encoder``
    (decoder_only only). ``composite_cracksam`` defaults to rank 8 on the
    attention QKV of every block, plus the decoder and prompt encoder.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    opts = dict(options)
    rank = None
    for key in ("rank", "r", "lora_rank"):
        if key in opts:
            value = opts.pop(key)
            if value is not None:
                rank = value
    targets = opts.pop("targets", opts.pop("lora_targets", None))
    last_k = opts.pop("last_k_blocks", opts.pop("last_k", None))
    with_prompt = bool(opts.pop("include_prompt_encoder", False))
    if opts:
        raise ConfigurationError(f"unknown plan options {sorted(opts)}")

    if strategy in LORA_STRATEGIES:
        if strategy == "composite_cracksam" and rank is None:
            rank = 8
        if rank is None:
            raise ConfigurationError("a LoRA plan needs a rank")
        if int(rank) != rank or rank < 0:
            raise ConfigurationError(f"LoRA rank must be a non-negative integer, got {rank!r}")
        targets = tuple(targets) if targets else ("attention-qkv",)
        for tag in targets:
            if tag not in ROLE_TAGS:
                raise ConfigurationError(f"LoRA target {tag!r} must be one of {ROLE_TAGS}")
        if last_k is not None and last_k < 1:
            raise ConfigurationError("last_k_blocks must be >= 1")
        if with_prompt:
            raise ConfigurationError("include_prompt_encoder applies to decoder_only")
        return TuningPlan(strategy, int(rank), targets, last_k)

    if rank is not None or targets or last_k is not None:
        raise ConfigurationError(f"strategy {strategy!r} takes no LoRA options")
    if with_prompt and strategy != "decoder_only":
        raise ConfigurationError("include_prompt_encoder applies to decoder_only")
    return TuningPlan(strategy, include_prompt_encoder=with_prompt)


# -- selection --------------------------------------------------------------------


@dataclass(frozen=True)
class AdapterSite:
    group: str
    d_in: int
    d_out: int
    rank: int

    @property
    def num_params(self) -> int:
        return lora_param_count(self.d_in, self.d_out, self.rank)


@dataclass(frozen=True)
class Selection:
    groups: tuple
    adapters: tuple = ()

    def __len__(self):
        return len(self.groups) + len(self.adapters)


def _require(spec: ArchitectureSpec, tag: str, present: set):
    if tag not in present:
        raise SelectionError(f"plan needs tag {tag!r}, which spec {spec.name!r} does not carry")


def _lora_sites(spec: ArchitectureSpec, plan: TuningPlan, present: set) -> list[AdapterSite]:
    missing = [t for t in plan.lora_targets if t not in present]
    if missing:
        raise SelectionError(f"spec {spec.name!r} has no groups tagged {missing}")
    candidates = [
        g for g in spec.groups if g.tags & set(plan.lora_targets) and len(g.shape) == 2
    ]
    if plan.last_k_blocks is not None:
        blocks = sorted({g.block for g in candidates if g.block is not None}, reverse=True)
        if plan.last_k_blocks > len(blocks):
            raise SelectionError(
                f"plan wants the last {plan.last_k_blocks} blocks but targets span {len(blocks)}"
            )
        keep = set(blocks[: plan.last_k_blocks])
        candidates = [g for g in candidates if g.block in keep]
    return [AdapterSite(g.name, g.shape[1], g.shape[0], plan.lora_rank) for g in candidates]


def select_trainables(spec_or_model: Union[ArchitectureSpec, nn.Module], plan: TuningPlan) -> Selection:
    """Resolve a plan to group names (in spec order) and LoRA adapter sites.

    LoRA leaves its base weights frozen; the adapters are the only trainables
    it adds.
    """
    spec = spec_or_model if isinstance(spec_or_model, ArchitectureSpec) else model_architecture(spec_or_model)
    present = spec.tags()
    s = plan.strategy
    if s == "none":
        return Selection(())
    if s == "full":
        return Selection(tuple(g.name for g in spec.groups))
    if s == "norm_only":
        if not present & set(NORM_TAGS):
            raise SelectionError(f"spec {spec.name!r} has no groups tagged {list(NORM_TAGS)}")
        return Selection(tuple(g.name for g in spec.groups if g.is_norm))
    if s == "decoder_only":
        wanted = {"decoder"}
        _require(spec, "decoder", present)
        if plan.include_prompt_encoder:
            _require(spec, "prompt-encoder", present)
            wanted.add("prompt-encoder")
        return Selection(tuple(g.name for g in spec.groups if g.tags & wanted))

    sites = tuple(_lora_sites(spec, plan, present))
    if s == "lora":
        return Selection((), sites)
    # composite: adapters on the encoder, decoder and prompt encoder fully trained
    _require(spec, "decoder", present)
    _require(spec, "prompt-encoder", present)
    wanted = {"decoder", "prompt-encoder"}
    return Selection(tuple(g.name for g in spec.groups if g.tags & wanted), sites)


@dataclass
class ParamBudget:
    trainable_count: int
    total_count: int
    breakdown: dict = field(default_factory=dict)

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable_count / self.total_count if self.total_count else 0.0

    @property
    def adapter_count(self) -> int:
        return sum(v for k, v in self.breakdown.items() if k.endswith(":lora"))


def audit_budget(spec: ArchitectureSpec, plan: TuningPlan) -> ParamBudget:
    """Count trainables for a plan: selected group sizes plus adapter parameters.

    The percentage is taken against the base model's size (adapters excluded).
    """
    selection = select_trainables(spec, plan)
    sizes = {g.name: g.size for g in spec.groups}
    breakdown = {name: sizes[name] for name in selection.groups}
    for site in selection.adapters:
        breakdown[f"{site.group}:lora"] = site.num_params
    return ParamBudget(sum(breakdown.values()), spec.total, breakdown)


def format_budget_table(rows: Sequence[tuple[str, ParamBudget]]) -> str:
    """Plain-text table with ``# Params`` and ``% Params`` columns."""
    width = max([len("Tuning Method")] + [len(label) for label, _ in rows])
    lines = [f"{'Tuning Method':<{width}}  {'# Params':>12}  {'% Params':>9}"]
    lines.append("-" * len(lines[0]))
    for label, b in rows:
        lines.append(f"{label:<{width}}  {b.trainable_count:>12,}  {b.percent:>9.4f}")
    return "\n".join(lines)


def humanize_count(n: int) -> str:
    """Table-style rounding: 30720 -> '30.7K', 196608 -> '197K', 3.7e6 -> '3.7M'."""
    for unit, div in (("M", 1_000_000), ("K", 1_000)):
        if n >= div:
            v = n / div
            return f"{v:.1f}{unit}" if v < 100 else f"{v:.0f}{unit}"
    return str(n)


# -- models -----------------------------------------------------------------------


def _component(name: str) -> Optional[str]:
    head = name.split(".", 1)[0]
    if "prompt" in head:
        return "prompt-encoder"
    if "decoder" in head:
        return "decoder"
    if "encoder" in head:
        return "encoder"
    return None


def _model_tags(name: str) -> set:
    tags = set()
    comp = _component(name)
    if comp:
        tags.add(comp)
    m = re.search(r"(?:^|\.)blocks\.(\d+)\.", name)
    if m and comp == "encoder":
        tags.add(f"block:{m.group(1)}")
        if ".attn.qkv." in name + ".":
            tags.add("attention-qkv")
        if ".mlp.lin2." in name + ".":
            tags.add("mlp-linear2")
    return tags


def group_parameters(model: nn.Module) -> dict[str, list[str]]:
    """Map each group name to the model parameter names it covers (adapters excluded)."""
    groups: dict[str, list[str]] = {}
    norm_params = set()
    for path, module in model.named_modules():
        if isinstance(module, AffineNorm):
            names = [f"{path}.weight", f"{path}.bias"]
            groups[path] = names
            norm_params.update(names)
    for name, _ in model.named_parameters():
        if name in norm_params or name.endswith(("lora_A", "lora_B")):
            continue
        groups[name] = [name]
    return groups


def model_architecture(model: nn.Module, name: Optional[str] = None) -> ArchitectureSpec:
    """Describe a model as an :class:`ArchitectureSpec` with tags inferred from names."""
    params = dict(model.named_parameters())
    modules = dict(model.named_modules())
    groups = []
    for gname, members in group_parameters(model).items():
        tags = _model_tags(gname)
        module = modules.get(gname)
        if isinstance(module, AffineNorm):
            tags.add(f"norm-{module.kind}")
            shape = (2, module.num_channels)
        else:
            shape = tuple(params[members[0]].shape)
        groups.append(ParamGroup(gname, shape, tags))
    return ArchitectureSpec(name or type(model).__name__, groups)


def _inject_lora(model: nn.Module, sites: Sequence[AdapterSite], seed: int):
    gen = torch.Generator().manual_seed(seed)
    modules = dict(model.named_modules())
    for site in sites:
        path = site.group.rsplit(".", 1)[0]
        layer = modules.get(path)
        if isinstance(layer, LoRALinear):
            continue
        if not isinstance(layer, nn.Linear):
            raise SelectionError(f"LoRA target {path!r} is not a linear layer")
        parent_path, _, attr = path.rpartition(".")
        parent = modules[parent_path] if parent_path else model
        setattr(parent, attr, LoRALinear.from_linear(layer, site.rank, generator=gen))


def apply_plan(model: nn.Module, plan: TuningPlan, seed: int = 0) -> list[str]:
    """Freeze everything outside the plan, inject adapters, return trainable names.

    Calling it again with the same plan is a no-op apart from re-freezing.
    """
    selection = select_trainables(model, plan)
    _inject_lora(model, selection.adapters, seed)
    trainable = selected_parameter_names(model, plan)
    names = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            names.append(name)
    model.tuning_plan = plan
    return names


def selected_parameter_names(model: nn.Module, plan: TuningPlan) -> set:
    selection = select_trainables(model, plan)
    members = group_parameters(model)
    names = set()
    for g in selection.groups:
        names.update(members[g])
    for site in selection.adapters:
        path = site.group.rsplit(".", 1)[0]
        names.update({f"{path}.lora_A", f"{path}.lora_B"})
    return names


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


@dataclass
class FreezeReport:
    passed: bool
    max_frozen_change: float
    changed_frozen: list
    changed_selected: list
    n_selected: int
    n_frozen: int

    def __bool__(self):
        return self.passed


def assert_frozen(model: nn.Module, plan: TuningPlan, before: dict, after: dict) -> FreezeReport:
    """Compare snapshots taken around training against the plan's freeze contract.

    Passes when every non-selected parameter is bit-identical and, if the plan
    selects anything, at least one selected parameter moved.
    """
    if before.keys() != after.keys():
        raise AuditError(f"snapshots cover different parameters: {sorted(before.keys() ^ after.keys())}")
    for name in before:
        if before[name].shape != after[name].shape:
            raise AuditError(f"{name}: shape {tuple(before[name].shape)} vs {tuple(after[name].shape)}")
    selected = selected_parameter_names(model, plan) & before.keys()
    frozen = before.keys() - selected
    max_change = 0.0
    changed_frozen = []
    for name in sorted(frozen):
        if not torch.equal(after[name], before[name]):
            changed_frozen.append(name)
            max_change = max(max_change, (after[name] - before[name]).abs().max().item())
    changed_selected = [n for n in sorted(selected) if not torch.equal(after[n], before[n])]
    passed = not changed_frozen and (not selected or bool(changed_selected))
    return FreezeReport(passed, max_change, changed_frozen, changed_selected, len(selected), len(frozen))
