"""``sac-kit`` command line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, LoadError, SacKitError

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _say(text=""):
    print(text, flush=True)


# -- plan and spec parsing ----------------------------------------------------------


def parse_plan(text: str):
    """Plan from a JSON file or a compact string.

    Compact forms: ``norm_only``, ``decoder_only``, ``decoder_only+prompt``,
    ``full``, ``none``, ``composite_cracksam[:r=8]`` and
    ``lora:r=8,targets=attention-qkv,last=4``.
    """
    from .selection import TuningPlan, make_plan

    path = Path(text)
    if text.endswith(".json") or path.is_file():
        try:
            return TuningPlan.from_dict(json.loads(path.read_text()))
        except OSError as exc:
            raise LoadError(f"cannot read plan {path}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"{path}: not a plan document ({exc})") from exc
    strategy, _, rest = text.partition(":")
    if strategy == "decoder_only+prompt":
        return make_plan("decoder_only", include_prompt_encoder=True)
    options = {}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"plan option {item!r} is not key=value")
        key = key.strip()
        if key in ("r", "rank"):
            options["rank"] = int(value)
        elif key == "targets":
            options["targets"] = tuple(value.split("+"))
        elif key in ("last", "last_k_blocks"):
            options["last_k_blocks"] = int(value)
        elif key == "prompt":
            options["include_prompt_encoder"] = value.lower() in ("1", "true", "yes")
        else:
            raise ConfigurationError(f"unknown plan option {key!r}")
    return make_plan(strategy, **options)


def load_spec(text: str):
    from .primitives import ToySegmenterSpec, build_toy_segmenter
    from .selection import load_architecture, model_architecture, sam_vit_b_spec

    if text in ("sam-vit-b", "sam_vit_b"):
        return sam_vit_b_spec()
    if text == "toy":
        return model_architecture(build_toy_segmenter(ToySegmenterSpec()), "toy-segmenter")
    return load_architecture(text)


# Rows of the tuning-method comparison, in its order.
DEFAULT_AUDIT_PLANS = (
    ("Tune Layer Norms", "norm_only"),
    ("Finetune Decoder", "decoder_only"),
    ("LoRA mlp-linear2 last 1, r=8", "lora:r=8,targets=mlp-linear2,last=1"),
    ("LoRA mlp-linear2 last 1, r=16", "lora:r=16,targets=mlp-linear2,last=1"),
    ("LoRA qkv last 2, r=8", "lora:r=8,targets=attention-qkv,last=2"),
    ("LoRA qkv last 2, r=16", "lora:r=16,targets=attention-qkv,last=2"),
    ("LoRA qkv last 4, r=8", "lora:r=8,targets=attention-qkv,last=4"),
    ("LoRA qkv last 4, r=16", "lora:r=16,targets=attention-qkv,last=4"),
    ("CrackSAM composite", "composite_cracksam"),
)


# -- subcommands ------------------------------------------------------------------


def cmd_audit(args):
    from .selection import audit_budget, format_budget_table, humanize_count

    spec = load_spec(args.spec)
    if args.plan:
        rows = [(p, parse_plan(p)) for p in args.plan]
    else:
        rows = [(label, parse_plan(p)) for label, p in DEFAULT_AUDIT_PLANS]
    budgets = [(label, audit_budget(spec, plan)) for label, plan in rows]
    _say(f"{spec.name}: {spec.total:,} parameters")
    _say(format_budget_table([(f"{label} ({humanize_count(b.trainable_count)})", b) for label, b in budgets]))
    if args.json:
        doc = [{"plan": label, "params": b.trainable_count, "percent": b.percent} for label, b in budgets]
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_train(args):
    from .training import load_train_config, run_train_job, with_overrides

    job = load_train_config(args.config)
    changes = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed)) if v is not None}
    if changes:
        job.config = with_overrides(job.config, **changes)
    _say(f"plan {job.plan.label()}  loss {job.loss.label()}  lr {job.config.lr:g}  batch {job.config.batch_size}")
    _, history = run_train_job(job, log=None if args.quiet else _say)
    if history.best_epoch is None:
        _say("no epochs run; nothing saved")
        return 0
    _say(f"best epoch {history.best_epoch + 1}  val F1 {history.best_f1:.4f}  -> {history.checkpoint}")
    return 0


def cmd_search(args):
    from .data import load_manifest, load_split
    from .primitives import ToySegmenterSpec, build_toy_segmenter
    from .search import load_search_space, run_search
    from .selection import TuningPlan, make_plan
    from .training import TrainConfig

    space, doc = load_search_space(args.space)
    base = Path(args.space).parent
    try:
        manifests = doc["manifests"]
    except KeyError as exc:
        raise ConfigurationError(f"{args.space}: missing key 'manifests'") from exc
    spec = ToySegmenterSpec.from_dict(doc.get("model", {}))
    model_seed = doc.get("model_seed", 0)
    plan = TuningPlan.from_dict(doc["plan"]) if "plan" in doc else make_plan("norm_only")
    train_set = load_split(load_manifest(base / manifests["train"]), spec.input_size)
    val_set = load_split(load_manifest(base / manifests["val"]), spec.input_size)
    template = TrainConfig(weight_decay=doc.get("weight_decay", 5e-5), seed=doc.get("train_seed", 0))
    out = Path(args.out) if args.out else base / doc.get("out", "search")
    result = run_search(
        space,
        lambda: build_toy_segmenter(spec, seed=model_seed),
        train_set,
        val_set,
        template,
        plan=plan,
        out_dir=out,
        log=None if args.quiet else _say,
    )
    failed = sum(r.failed for r in result.trials)
    _say(f"best: {result.best.config.label()}  val F1 {result.best.val_f1:.4f}  ({failed} failed)")
    _say(f"trial log: {out / 'trials.csv'}")
    return 0


def cmd_eval(args):
    from .evaluation import EvalJob, write_text

    report = EvalJob(Path(args.ckpt), [Path(args.manifest)], args.tau).run()
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        write_text(Path(args.out), text)
    return 0


def cmd_zeroshot(args):
    from .evaluation import EvalJob, write_text

    if len(args.manifests) < 2:
        raise ConfigurationError("zeroshot needs at least two manifests")
    report = EvalJob(Path(args.ckpt), [Path(m) for m in args.manifests], args.tau).run()
    _say(report.table())
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        write_text(Path(args.out), text)
    return 0


def cmd_panels(args):
    from .data import load_manifest, load_split
    from .evaluation import export_qualitative, load_model

    model = load_model(Path(args.ckpt))
    samples = load_split(load_manifest(args.manifest), model.input_size)
    if args.limit is not None:
        samples.ids, samples.images, samples.masks = (
            samples.ids[:args.limit], samples.images[:args.limit], samples.masks[:args.limit]
        )
    export = export_qualitative(model, samples, args.tau, args.out)
    _say(f"wrote {len(export.panes)} panes and {len(export.rows)} rows to {args.out}")
    return 0


def cmd_synth(args):
    from .data import synth_crack_dataset

    manifest = synth_crack_dataset(args.n, args.size, args.seed, args.out, name=args.name, split=args.split)
    _say(f"wrote {len(manifest)} {args.split} pairs to {manifest.path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sac-kit", description="Selective fine-tuning toolkit for crack segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("audit", help="count trainable parameters per tuning plan")
    p.add_argument("--spec", default="sam-vit-b", help="architecture JSON, 'sam-vit-b' or 'toy'")
    p.add_argument("--plan", action="append", help="plan string or JSON file (repeatable)")
    p.add_argument("--json", help="also write the rows as JSON")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="fine-tune the toy segmenter from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="random search over loss, lr and batch size")
    p.add_argument("--space", required=True)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a checkpoint on one test manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", help="write the CSV here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", help="score a checkpoint on held-out manifests and aggregate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("panels", help="export qualitative panes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_panels)

    p = sub.add_parser("synth", help="write a synthetic crack dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SacKitError as exc:
        print(f"sac-kit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
