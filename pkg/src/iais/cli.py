"""Command-line entry point: ``iais <command> ...``.

Metric output uses 6 significant digits in a fixed field order. Any failure
prints a single ``error: <kind>: <message>`` line on stderr; usage problems
(unknown flags, missing files, invalid combinations) exit with status 2 and
everything else with status 1. Results are only printed once fully computed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as fmt
from .attention import split_blocks
from .isda import isda, isda_breakdown
from .regularizer import DISTRIBUTED, SINGULAR, iais_distributed, iais_singular
from .tensor_ops import pearson, row_softmax
from .training.losses import SCHEDULES, lambda_schedule
from .training.synthetic import SyntheticTask
from .training.trainer import TrainConfig, train

USAGE_STATUS = 2
FAILURE_STATUS = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def g6(x) -> str:
    if x is None:
        return "nan"
    return f"{float(x):.6g}"


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _layer_arg(value: str):
    if value == "last":
        return "last"
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'last' or an integer") from None


# -- isda / iais ----------------------------------------------------------------

def _head_probs(bundle, layer):
    n_l = bundle.layout.n_l
    for s in bundle.layer(layer):
        p = row_softmax(s, bundle.scale)
        yield p[:n_l, :n_l], p[n_l:, n_l:]


def cmd_isda(args) -> str:
    bundle = fmt.read_attention_bundle(_existing(args.attn))
    if args.annotations is not None:
        ann = fmt.read_annotations(_existing(args.annotations))
    elif bundle.annotations is not None:
        ann = bundle.annotations
    else:
        raise UsageError("isda needs --annotations (the bundle carries no annotation block)")
    ann.validate_layout(bundle.layout)
    heads = list(_head_probs(bundle, args.layer))
    if args.heads == "mean":
        p_ll = np.mean([h[0] for h in heads], axis=0)
        p_vv = np.mean([h[1] for h in heads], axis=0)
        value = isda(p_ll, p_vv, ann)
        rows = isda_breakdown(p_ll, p_vv, ann)
    else:
        value = sum(isda(a, b, ann) for a, b in heads)
        rows = np.sum([isda_breakdown(a, b, ann) for a, b in heads], axis=0)
    lines = [f"isda {g6(value)}", "object,name,contribution"]
    lines += [f"{i},{obj.name},{g6(r)}" for i, (obj, r) in enumerate(zip(ann.objects, rows))]
    return "\n".join(lines) + "\n"


def cmd_iais(args) -> str:
    bundle = fmt.read_attention_bundle(_existing(args.attn))
    fn = iais_singular if args.mode == SINGULAR else iais_distributed
    mats = bundle.layer(args.layer)
    if args.heads == "mean":
        mats = [np.mean(mats, axis=0)]
    v = l = 0.0
    for m in mats:
        _, parts = fn(split_blocks(m, bundle.layout), bundle.scale)
        v += parts.v
        l += parts.l
    loss = {"both": v + l, "v": v, "l": l}[args.anchor]
    return f"loss {g6(loss)}\niais_v {g6(v)}\niais_l {g6(l)}\n"


# -- schedule -------------------------------------------------------------------

def cmd_schedule(args) -> str:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    if not args.gamma > 0:
        raise UsageError("--gamma must be > 0")
    lams = [lambda_schedule(args.kind, args.gamma, t, args.steps) for t in range(args.steps + 1)]
    if args.out:
        Path(args.out).write_text("step,lambda\n" + "".join(f"{t},{lam!r}\n" for t, lam in enumerate(lams)),
                                  encoding="utf-8")
    return "step,lambda\n" + "".join(f"{t},{g6(lam)}\n" for t, lam in enumerate(lams))


# -- training -------------------------------------------------------------------

def load_config(path) -> tuple[TrainConfig, SyntheticTask]:
    doc = fmt._load_json(_existing(path))
    if not isinstance(doc, dict) or set(doc) - {"train", "task"}:
        raise fmt.FormatError(path, "$", "config must be an object with optional 'train' and 'task' sections")
    try:
        return TrainConfig.from_dict(doc.get("train", {})), SyntheticTask.from_dict(doc.get("task", {}))
    except (TypeError, ValueError) as e:
        raise fmt.FormatError(path, "$", str(e)) from None


def cmd_train(args) -> str:
    config, task = load_config(args.config)
    record = train(config, task)
    csv_path, json_path = fmt.write_run_record(record, args.out)
    s = record.summary()
    return (f"final_isda {g6(s['final_isda'])}\nfinal_meta_sum {g6(s['final_meta_sum'])}\n"
            f"pearson_isda_metasum {g6(s['pearson_isda_metasum'])}\n")


COMPARE_HEADER = "run,checkpoints,final_isda,final_meta_sum,pearson_isda_metasum"


def _run_row(name: str, run_dir: Path) -> str:
    cps = fmt.read_run_csv(_existing(str(run_dir / "run.csv")))
    if not cps:
        raise fmt.FormatError(run_dir / "run.csv", "rows", "run record has no checkpoints")
    isda_col = np.array([c.isda for c in cps])
    ms_col = np.array([c.meta_sum for c in cps])
    try:
        r = pearson(isda_col, ms_col) if len(cps) > 1 else None
    except ValueError:
        r = None
    return f"{name},{len(cps)},{g6(cps[-1].isda)},{g6(cps[-1].meta_sum)},{g6(r)}"


def compare_table(runs) -> str:
    """``runs`` is a list of ``(name, directory)``."""
    return COMPARE_HEADER + "\n" + "".join(_run_row(n, Path(d)) + "\n" for n, d in runs)


def cmd_compare(args) -> str:
    dirs = [d for d in args.runs.split(",") if d]
    if not dirs:
        raise UsageError("--runs needs at least one directory")
    return compare_table([(d, d) for d in dirs])


def ablation_variants(axis: str, config: TrainConfig) -> list[tuple[str, dict]]:
    if axis == "anchor":
        return [(f"anchor={a}", {"anchor": a}) for a in ("both", "v", "l")]
    if axis == "layer":
        return [(f"layer={i}", {"iais_layer": i}) for i in range(config.n_layers)]
    if axis == "schedule":
        out = [(f"{k}_gamma={g:g}", {"schedule": k, "gamma": g}) for k in ("exp", "log") for g in (5.0, 10.0)]
        return out + [("linear", {"schedule": "linear"}), ("constant", {"schedule": "constant"})]
    if axis == "kind":
        return [(f"kind={k}", {"iais_kind": k}) for k in ("none", SINGULAR, DISTRIBUTED)]
    raise UsageError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> str:
    config, task = load_config(args.config)
    if config.iais_kind == "none" and args.axis != "kind":
        raise UsageError(f"a {args.axis} ablation needs iais_kind singular or distributed in the config")
    out = Path(args.out)
    runs = []
    for name, change in ablation_variants(args.axis, config):
        cfg = TrainConfig.from_dict({**config.to_dict(), **change})
        fmt.write_run_record(train(cfg, task), out / name)
        runs.append((name, out / name))
    table = compare_table(runs)
    (out / "comparison.csv").write_text(table, encoding="utf-8")
    return table


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iais", description="Intra-modal self-attention alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("isda", help="ISDa of one attention bundle")
    s.add_argument("--attn", required=True)
    s.add_argument("--annotations")
    s.add_argument("--layer", type=_layer_arg, default="last")
    s.add_argument("--heads", choices=("mean", "sum"), default="mean")
    s.set_defaults(func=cmd_isda)

    s = sub.add_parser("iais", help="alignment loss of one attention bundle")
    s.add_argument("--attn", required=True)
    s.add_argument("--mode", choices=(SINGULAR, DISTRIBUTED), required=True)
    s.add_argument("--anchor", choices=("both", "v", "l"), default="both")
    s.add_argument("--layer", type=_layer_arg, default="last")
    s.add_argument("--heads", choices=("mean", "sum"), default="mean")
    s.set_defaults(func=cmd_iais)

    s = sub.add_parser("schedule", help="tabulate a lambda schedule")
    s.add_argument("--kind", choices=SCHEDULES, required=True)
    s.add_argument("--gamma", type=float, default=5.0)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("train", help="train on the synthetic task and write a run record")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compare", help="tabulate finished runs")
    s.add_argument("--runs", required=True, help="comma-separated run directories")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("ablate", help="train one variant per setting of an axis and compare")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", choices=("anchor", "layer", "schedule", "kind"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, message: str, status: int) -> int:
    print(f"error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        output = args.func(args)
    except UsageError as e:
        return _fail("usage", e, USAGE_STATUS)
    except fmt.FormatError as e:
        return _fail(e.kind, e, FAILURE_STATUS)
    except (ValueError, IndexError, OSError, RuntimeError) as e:
        return _fail(type(e).__name__, e, FAILURE_STATUS)
    sys.stdout.write(output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
