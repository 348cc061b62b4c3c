"""Command-line entry point: ``cascadeseg {gradcheck,gendata,train,infer,eval,bench}``.

Every invocation ends with a run report (``key = value`` lines after a
``# run report`` marker) on stdout, including failed runs.  Exit status is 0
on success, 1 on operational failure and 2 on usage errors.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time

from . import __version__
from .cascade.config import CascadeConfig, desk_config, parse_key_values, tiny_config
from .cascade.model import check_params, init_params
from .cascade.train import format_log_line, train
from .evaluation import EvaluationInputError, coco_map, evaluate_map, format_report
from .inference import SEGMENTS, Timer, infer_dataset, infer_scene, read_predictions, write_predictions
from .params import load_checkpoint, save_checkpoint, schedule_length
from .synth import DatasetSpec, generate_dataset, generate_scene, read_dataset, save_dataset
from .tensor import ContractError

PRESETS = {"desk": desk_config, "tiny": tiny_config, "default": CascadeConfig}


class RunReport:
    def __init__(self, subcommand):
        self.subcommand = subcommand
        self.fields = {}
        self.seconds = {}
        self.status = 0

    def set(self, key, value):
        self.fields[key] = value

    def text(self):
        lines = ["# run report", f"subcommand = {self.subcommand}", f"status = {self.status}"]
        lines += [f"{k} = {v}" for k, v in self.fields.items()]
        lines += [f"seconds[{k}] = {v:.4f}" for k, v in self.seconds.items()]
        return "\n".join(lines) + "\n"


class UsageError(Exception):
    pass


def load_config(value, args=None):
    """A preset name or a ``key = value`` file, with command-line overrides."""
    if value is None:
        cfg = desk_config()
    elif value in PRESETS:
        cfg = PRESETS[value]()
    else:
        cfg = CascadeConfig.load(value)
    if args is not None and getattr(args, "stages", None) is not None:
        cfg = cfg.replace(train_stages=args.stages)
    return cfg


def _config_echo(cfg):
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True)


def _load_params(args, cfg):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    params = load_checkpoint(args.checkpoint, cfg.np_dtype)
    check_params(params, cfg)
    return params


def _load_scenes(args, report):
    if args.dataset is None:
        raise UsageError("--dataset is required")
    scenes, spec = read_dataset(args.dataset)
    report.set("dataset", args.dataset)
    report.set("scenes", len(scenes))
    return scenes, spec


def _check_categories(cfg, spec):
    if spec is not None and spec.num_categories != cfg.num_categories:
        raise ContractError(f"dataset has {spec.num_categories} categories, configuration expects {cfg.num_categories}")


# ----------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args, report):
    from .gradcheck import run_all

    results = run_all(seed=args.seed, quick=args.quick)
    ok = True
    for res in results:
        for line in res.lines():
            print(line)
        report.seconds[res.name] = res.seconds
        for q, (err, tol) in res.errors.items():
            report.set(f"max_rel_err[{res.name}: {q}]", f"{err:.3e}")
        ok &= res.passed
    print("all suites within tolerance" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_gendata(args, report):
    if args.out is None:
        raise UsageError("--out is required")
    values = {}
    if args.config is not None:
        with open(args.config) as fh:
            values = parse_key_values(fh.read(), DatasetSpec)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.num_scenes is not None:
        values["num_scenes"] = args.num_scenes
    spec = DatasetSpec.from_dict(values)
    start = time.perf_counter()
    scenes = generate_dataset(spec)
    save_dataset(scenes, args.out, spec)
    report.seconds["generate"] = time.perf_counter() - start
    report.set("spec", json.dumps(spec.to_dict(), sort_keys=True))
    report.set("scenes", len(scenes))
    report.set("out", args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args, report):
    if args.out is None:
        raise UsageError("--out is required")
    cfg = load_config(args.config, args)
    scenes, spec = _load_scenes(args, report)
    _check_categories(cfg, spec)
    seed = args.seed or 0
    params = _load_params(args, cfg) if args.checkpoint else init_params(cfg, seed)
    iters = schedule_length(cfg.schedule) if args.iters is None else args.iters
    report.set("config", _config_echo(cfg))
    report.set("iterations", iters)
    log_path = args.log or args.out + ".log"
    start = time.perf_counter()

    def save_periodic(rep):
        it = rep["iter"] + 1
        if args.save_every and it % args.save_every == 0 and it < iters:
            save_checkpoint(params, f"{args.out}.{it}")

    with open(log_path, "w") as fh:
        reports = train(params, scenes, cfg, iters, seed, fh, save_periodic)
    save_checkpoint(params, args.out)
    report.seconds["train"] = time.perf_counter() - start
    report.set("checkpoint", args.out)
    report.set("loss_log", log_path)
    if reports:
        report.set("first", format_log_line(reports[0]))
        report.set("last", format_log_line(reports[-1]))
    print(f"trained {iters} iterations; checkpoint {args.out}; loss log {log_path}")
    return 0


def cmd_infer(args, report):
    if args.out is None:
        raise UsageError("--out is required")
    cfg = load_config(args.config)
    scenes, spec = _load_scenes(args, report)
    _check_categories(cfg, spec)
    params = _load_params(args, cfg)
    timer = Timer()
    preds = infer_dataset(params, scenes, cfg, timer)
    write_predictions(preds, args.out)
    report.seconds.update(timer.seconds)
    report.set("config", _config_echo(cfg))
    report.set("instances", sum(len(v) for v in preds.values()))
    report.set("out", args.out)
    print(f"wrote predictions for {len(scenes)} scenes to {args.out}")
    return 0


def cmd_eval(args, report):
    if args.predictions is None:
        raise UsageError("--predictions is required")
    scenes, spec = _load_scenes(args, report)
    preds = read_predictions(args.predictions)
    n = spec.num_categories if spec is not None else None
    names = {i + 1: c for i, c in enumerate(spec.categories)} if spec is not None else None
    results = [evaluate_map(preds, scenes, kind="mask", num_categories=n), evaluate_map(preds, scenes, kind="box", num_categories=n)]
    extra = {"mAP_r@[.5:.95]": coco_map(preds, scenes, "mask", n)}
    text = format_report(results, names, extra)
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    for r in results:
        for t, v in r.mean.items():
            report.set(f"mAP_{'r' if r.kind == 'mask' else 'b'}@{t:g}", f"{v:.6f}")
    return 0


def cmd_bench(args, report):
    cfg = load_config(args.config)
    seed = args.seed or 0
    if args.dataset:
        scenes, _ = _load_scenes(args, report)
        scenes = scenes[: args.images]
    else:
        spec = DatasetSpec(num_scenes=args.images, seed=seed)
        scenes = [generate_scene(spec, i) for i in range(args.images)]
    params = _load_params(args, cfg) if args.checkpoint else init_params(cfg, seed)
    infer_scene(params, scenes[0], cfg)  # warm-up
    timer = Timer()
    for scene in scenes:
        infer_scene(params, scene, cfg, timer)
    per = {k: timer.seconds[k] / len(scenes) for k in SEGMENTS}
    names = list(SEGMENTS) + ["total"]
    vals = [per[k] for k in SEGMENTS] + [sum(per.values())]
    print("seconds per image")
    print("  ".join(f"{n:>8}" for n in names))
    print("  ".join(f"{v:8.4f}" for v in vals))
    report.seconds.update(per)
    report.set("images", len(scenes))
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "gendata": cmd_gendata,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cascadeseg", description="Instance segmentation cascade on synthetic shapes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    def common(p, *flags):
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        if "config" in flags:
            p.add_argument("--config", help="configuration file or preset (desk, tiny, default)")
        for name in ("dataset", "checkpoint", "out"):
            if name in flags:
                p.add_argument(f"--{name}")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suites"))
    p.add_argument("--quick", action="store_true", help="sample parameter entries in the end-to-end suite")

    p = common(sub.add_parser("gendata", help="write a synthetic dataset"), "out")
    p.add_argument("--config", help="dataset spec file (key = value)")
    p.add_argument("--num-scenes", type=int)

    p = common(sub.add_parser("train", help="train a cascade"), "config", "dataset", "checkpoint", "out")
    p.add_argument("--stages", type=int, choices=(3, 5))
    p.add_argument("--iters", type=int)
    p.add_argument("--log", help="loss log path (default OUT.log)")
    p.add_argument("--save-every", type=int, default=0)

    common(sub.add_parser("infer", help="predict instances for a dataset"), "config", "dataset", "checkpoint", "out")

    p = common(sub.add_parser("eval", help="mAP^r and mAP^b of a prediction file"), "dataset", "out")
    p.add_argument("--predictions", required=False)

    p = common(sub.add_parser("bench", help="per-stage inference timing"), "config", "dataset", "checkpoint")
    p.add_argument("--images", type=int, default=10)
    return parser


def main(argv=None):
    parser = build_parser()
    report = RunReport(None)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        report.status = 2
        sys.stdout.write(report.text())
        return 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        report.status = 2
        sys.stdout.write(report.text())
        return 2

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    report.subcommand = args.command
    report.set("seed", args.seed if args.seed is not None else 0)
    try:
        report.status = COMMANDS[args.command](args, report)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"cascadeseg {args.command}: error: {err}", file=sys.stderr)
        report.status = 2
    except (OSError, ValueError, ContractError, EvaluationInputError, FloatingPointError) as err:
        print(f"cascadeseg {args.command}: error: {err}", file=sys.stderr)
        report.status = 1
    sys.stdout.write(report.text())
    return report.status


if __name__ == "__main__":
    sys.exit(main())
