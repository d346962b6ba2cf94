"""``mtpeft`` command line: train, eval, compare, pairwise, params, gen-synthetic."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .backbone import trainable_census
from .config import ExperimentConfig, data_summary, dump_config, load_config, parse_config, prepare_data
from .errors import ConfigError, DataError, MtpeftError
from .mtl import assemble_model, load_model, save_model
from .reports import (compare, compare_markdown, load_report, pairwise_grid, pairwise_markdown,
                      pairwise_plan, write_json)
from .synthetic import SyntheticSpec, generate_synthetic_tasks, write_synthetic_tasks
from .trainer import RunReport, evaluate, token_cost, train

log = logging.getLogger("mtpeft")

OUTPUT_ROOT_ENV = "MTPEFT_OUTPUT_ROOT"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args, cfg: ExperimentConfig | None = None, default: str = "out") -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root() / (cfg.name if cfg is not None else default)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    tasks = args.tasks.split(",") if getattr(args, "tasks", None) else None
    cfg = cfg.with_overrides(seed=args.seed, tasks=tasks, name=getattr(args, "name", None))
    if getattr(args, "peft_method", None):
        if cfg.mode != "peft":
            raise ConfigError("peft.method", "--peft-method needs mode: peft")
        cfg.peft.method = args.peft_method
        cfg.peft.validate()
    return cfg


def build_model(cfg: ExperimentConfig, initialize: bool = True):
    return assemble_model(
        cfg.backbone, cfg.tasks, cfg.mode, cfg.peft, cfg.loss_weighting,
        cfg.train.head_dropout, cfg.train.retrieval_temperature, cfg.seed, cfg.train.dtype, initialize,
    )


def summary_markdown(report: RunReport) -> str:
    lines = [f"# Run `{report.run_name}`", "",
             f"- mode: {report.mode}" + (f" ({report.peft_method})" if report.peft_method else ""),
             f"- tasks: {', '.join(report.tasks)}",
             f"- best epoch: {report.best_epoch} (valid loss {report.best_valid_loss:.4f}, "
             f"{report.early_stop_aggregate})",
             f"- updates to best: {report.updates_to_best}; tokens to best: {token_cost(report)} "
             f"({report.batch_size_semantics}, seq {report.max_seq_len})",
             f"- trainable: {report.census['peft_only']['percent']:.2f}% PEFT-only, "
             f"{report.census['with_heads']['percent']:.2f}% with heads",
             "", "| Task | Metric | Valid | Test |", "|---|---|---|---|"]
    for t in report.tasks:
        v, s = report.valid_metrics.get(t), report.test_metrics.get(t)
        lines.append(f"| {t} | {report.metrics[t]} | {'-' if v is None else f'{100 * v:.2f}'} "
                     f"| {'-' if s is None else f'{100 * s:.2f}'} |")
    lines += ["", "| Epoch | Updates | Valid loss | " + " | ".join(report.tasks) + " | alpha |",
              "|" + "---|" * (len(report.tasks) + 4)]
    for e in report.epochs:
        metrics = " | ".join(f"{100 * e['valid_metric'][t]:.2f}" for t in report.tasks)
        alpha = ", ".join(f"{a:.3f}" for a in e["alpha"])
        lines.append(f"| {e['epoch']} | {e['updates']} | {e['valid_aggregate']:.4f} | {metrics} | {alpha} |")
    return "\n".join(lines) + "\n"


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    data = prepare_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    report = train(model, data, cfg.train, run_name=cfg.name)
    payload = report.to_dict()
    payload["tokens_to_best"] = token_cost(report)
    payload["config"] = cfg.to_dict()
    payload["data_summary"] = data_summary(data)
    write_json(out / "report.json", payload)
    save_model(model, out / "model.npz", extra={"experiment": cfg.to_dict(), "base_dir": cfg.base_dir})
    (out / "summary.md").write_text(summary_markdown(report), encoding="utf-8")
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    print(json.dumps({"run": cfg.name, "out": str(out), "test_metrics": report.test_metrics,
                      "tokens_to_best": payload["tokens_to_best"]}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config(meta["experiment"], meta.get("base_dir", "."))
    lookup = {t.name: t for t in model.tasks}
    if args.task not in lookup:
        raise ConfigError("task", f"unknown task {args.task!r}; checkpoint has {sorted(lookup)}")
    cfg = cfg.with_overrides(tasks=[args.task])
    data = prepare_data(cfg)
    ds = data[args.split][0]
    task = lookup[args.task]
    ds.task_id = task.task_id
    value = evaluate(model, task, ds, cfg.train.eval_batch_size, cfg.train.retrieval_eval_pool)
    result = {"task": task.name, "split": args.split, "metric": task.metric, "value": value}
    text = json.dumps(result, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_compare(args) -> int:
    baseline = load_report(args.baseline)
    reports = [load_report(p) for p in args.reports]
    result = compare(reports, baseline)
    md = compare_markdown(result)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "comparison.json", result)
        (out / "comparison.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


def _run_sub(cmd: list[str], log_path: Path) -> int:
    with open(log_path, "w", encoding="utf-8") as fh:
        return subprocess.run(cmd, stdout=fh, stderr=subprocess.STDOUT, check=False).returncode


def cmd_pairwise(args) -> int:
    cfg = _load(args)
    if len(cfg.tasks) != 4:
        raise ConfigError("tasks", f"pairwise needs 4 tasks, config has {len(cfg.tasks)}")
    names = [t.name for t in cfg.tasks]
    out = _out_dir(args, cfg)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    plan = pairwise_plan(names)
    jobs = []
    for run_name, subset in plan:
        run_dir = out / "runs" / run_name
        cmd = [sys.executable, "-m", "mtpeft", "train", "--config", str(Path(args.config).resolve()),
               "--tasks", ",".join(subset), "--name", run_name, "--out", str(run_dir)]
        if args.seed is not None:
            cmd += ["--seed", str(args.seed)]
        if args.peft_method:
            cmd += ["--peft-method", args.peft_method]
        run_dir.mkdir(parents=True, exist_ok=True)
        jobs.append((run_name, run_dir, cmd))
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        codes = list(pool.map(lambda j: _run_sub(j[2], j[1] / "train.log"), jobs))
    results = {}
    for (run_name, run_dir, _), code in zip(jobs, codes):
        report_path = run_dir / "report.json"
        results[run_name] = load_report(report_path) if code == 0 and report_path.is_file() else None
        if results[run_name] is None:
            log.error("run %s failed (exit %d); see %s", run_name, code, run_dir / "train.log")
    grid = pairwise_grid(names, results)
    write_json(out / "pairwise.json", grid)
    md = pairwise_markdown(grid)
    (out / "pairwise.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return EXIT_FAILURE if grid["failed"] else EXIT_OK


def cmd_params(args) -> int:
    cfg = _load(args)
    model = build_model(cfg, initialize=False)
    census = {k: v.to_dict() for k, v in trainable_census(model).items()}
    result = {"name": cfg.name, "mode": cfg.mode,
              "peft_method": cfg.peft.method if cfg.peft else None, "census": census}
    lines = ["| Denominator | Trainable | Total | Trainable% |", "|---|---|---|---|"]
    for key, c in census.items():
        lines.append(f"| {key} | {c['count']} | {c['total']} | {c['percent']:.2f} |")
    md = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "params.json", result)
        (out / "params.md").write_text(md, encoding="utf-8")
    print(json.dumps(result, sort_keys=True))
    print(md, end="")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        spec = cfg.synthetic or SyntheticSpec()
        seed = cfg.synthetic_seed if cfg.synthetic_seed is not None else cfg.seed
    else:
        spec, seed = SyntheticSpec().validate(), 42
    if args.seed is not None:
        seed = args.seed
    out = _out_dir(args, default="synthetic")
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = write_synthetic_tasks(generate_synthetic_tasks(spec, seed), out)
        manifest = {"seed": seed, "spec": spec.to_dict(), "files": files}
        write_json(out / "manifest.json", manifest)
    except OSError as exc:
        raise DataError(f"cannot write synthetic data to {out}: {exc.strerror or exc}") from exc
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtpeft", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    # also accepted after the subcommand; SUPPRESS keeps an absent flag from resetting the global one
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        return sub.add_parser(name, help=help, parents=[verbose])

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<name>)")

    p = command("train", help="train one configuration")
    common(p)
    p.add_argument("--tasks", help="comma-separated subset of the configured tasks")
    p.add_argument("--name", help="run name override")
    p.add_argument("--peft-method", help="PEFT method override")
    p.set_defaults(func=cmd_train)

    p = command("eval", help="evaluate a checkpoint on one task split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--config", help="experiment YAML (default: the one stored in the checkpoint)")
    p.add_argument("--out", help="write the metric JSON here")
    p.set_defaults(func=cmd_eval)

    p = command("compare", help="compare run reports against a baseline")
    p.add_argument("reports", nargs="+", help="report.json files")
    p.add_argument("--baseline", required=True, help="baseline report.json")
    p.add_argument("--out", help="directory for comparison.json and comparison.md")
    p.set_defaults(func=cmd_compare)

    p = command("pairwise", help="single, pairwise and all-task grid")
    common(p)
    p.add_argument("--peft-method", help="PEFT method override")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_pairwise)

    p = command("params", help="trainable-parameter census without training")
    common(p)
    p.add_argument("--peft-method", help="PEFT method override")
    p.set_defaults(func=cmd_params)

    p = command("gen-synthetic", help="write the synthetic task files")
    common(p, config_required=False)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MtpeftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
