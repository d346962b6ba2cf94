"""Comparison tables and pairwise grids built from run-report JSON."""

from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Sequence

from .errors import ReportMismatchError
from .trainer import RunReport, token_cost

UP, DOWN = "↑", "↓"


def load_report(path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def run_label(report: RunReport) -> str:
    method = report.peft_method if report.mode == "peft" else "full"
    kind = "MFT" if report.n_tasks > 1 else "SFT"
    return f"{kind} {method}"


def macro_score(scores: dict[str, float]) -> float:
    return sum(scores.values()) / len(scores)


def _fmt(x: float | None, digits: int = 2) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def _arrow(delta: float) -> str:
    if delta > 0:
        return UP
    if delta < 0:
        return DOWN
    return ""


def sft_mft_ratio(mft: RunReport, reports: Sequence[RunReport]) -> float | None:
    """Summed single-task tokens over the multi-task run's tokens.

    Single-task runs must match the multi-task run's mode and PEFT method and
    cover each of its tasks; otherwise ``None``.
    """
    sft = {}
    for r in reports:
        if r.n_tasks == 1 and r.mode == mft.mode and r.peft_method == mft.peft_method:
            sft.setdefault(r.tasks[0], r)
    if mft.n_tasks < 2 or any(t not in sft for t in mft.tasks):
        return None
    mft_tokens = token_cost(mft)
    if mft_tokens == 0:
        return None
    return sum(token_cost(sft[t]) for t in mft.tasks) / mft_tokens


def compare(reports: Sequence[RunReport], baseline: RunReport, names: Sequence[str] | None = None) -> dict:
    """Per-task deltas (percentage points) against ``baseline``."""
    if len(reports) < 1:
        raise ReportMismatchError("compare needs at least one report besides the baseline")
    base_tasks = baseline.tasks
    for r in reports:
        extra = [t for t in r.tasks if t not in base_tasks]
        if extra:
            raise ReportMismatchError(
                f"run {r.run_name!r} has task(s) {extra} absent from baseline tasks {base_tasks}")
        for t in r.tasks:
            if r.metrics.get(t) != baseline.metrics.get(t):
                raise ReportMismatchError(f"task {t!r}: metric differs between {r.run_name!r} and baseline")
    names = list(names) if names else [r.run_name for r in reports]
    rows = []
    for name, r in zip(names, reports):
        scores = {t: r.test_metrics[t] for t in base_tasks if t in r.test_metrics}
        deltas = {t: (scores[t] - baseline.test_metrics[t]) * 100.0 for t in scores}
        rows.append({
            "run": name,
            "label": run_label(r),
            "tasks": list(r.tasks),
            "scores": scores,
            "deltas_pp": deltas,
            "direction": {t: _arrow(d) for t, d in deltas.items()},
            "macro": macro_score(scores) if scores else None,
            "trainable_percent": {k: v["percent"] for k, v in r.census.items()},
            "updates_to_best": r.updates_to_best,
            "global_batch_size": r.global_batch_size,
            "max_seq_len": r.max_seq_len,
            "tokens_to_best": token_cost(r),
            "sft_mft_ratio": sft_mft_ratio(r, reports),
        })
    return {
        "baseline": baseline.run_name,
        "tasks": list(base_tasks),
        "metrics": dict(baseline.metrics),
        "baseline_scores": dict(baseline.test_metrics),
        "baseline_macro": macro_score(baseline.test_metrics),
        "batch_size_semantics": baseline.batch_size_semantics,
        "rows": rows,
    }


def compare_markdown(result: dict) -> str:
    tasks = result["tasks"]
    header = (["Run", "Method"] + [f"{t} ({result['metrics'][t]})" for t in tasks]
              + ["Macro", "Trainable% (PEFT-only)", "Trainable% (with heads)", "Tokens", "SFT/MFT"])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    base = ["baseline: " + result["baseline"], ""]
    base += [_fmt(100 * result["baseline_scores"][t]) for t in tasks]
    base += [_fmt(100 * result["baseline_macro"])] + [""] * 4
    lines.append("| " + " | ".join(base) + " |")
    for row in result["rows"]:
        cells = [row["run"], row["label"]]
        for t in tasks:
            if t in row["scores"]:
                d = row["deltas_pp"][t]
                cells.append(f"{100 * row['scores'][t]:.2f} ({d:+.2f}{row['direction'][t]})")
            else:
                cells.append("-")
        tp = row["trainable_percent"]
        cells += [_fmt(None if row["macro"] is None else 100 * row["macro"]),
                  _fmt(tp.get("peft_only")), _fmt(tp.get("with_heads")),
                  str(row["tokens_to_best"]), _fmt(row["sft_mft_ratio"])]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append(f"Scores in %, deltas in percentage points vs `{result['baseline']}`; "
                 f"tokens = updates to best x global batch x sequence length "
                 f"({result['batch_size_semantics']}).")
    return "\n".join(lines) + "\n"


# -- pairwise grid -------------------------------------------------------------

def pairwise_plan(tasks: Sequence[str]) -> list[tuple[str, list[str]]]:
    """Run name and task subset for every single, pair and all-task run."""
    plan = [(f"sft-{t}", [t]) for t in tasks]
    plan += [(f"pair-{a}-{b}", [a, b]) for a, b in itertools.combinations(tasks, 2)]
    plan.append(("mft-all", list(tasks)))
    return plan


def pairwise_grid(tasks: Sequence[str], results: dict[str, RunReport | None]) -> dict:
    """Rows per main task: its score under each partner, plus both baselines.

    ``results`` maps run name to report, or ``None`` for a failed run.
    """
    def score(run: str, task: str):
        r = results.get(run)
        return None if r is None else r.test_metrics.get(task)

    rows = {}
    for main in tasks:
        pairs = {}
        for other in tasks:
            if other == main:
                continue
            a, b = sorted((main, other), key=list(tasks).index)
            pairs[other] = {"run": f"pair-{a}-{b}", "score": score(f"pair-{a}-{b}", main)}
        rows[main] = {
            "pairs": pairs,
            "single_task": score(f"sft-{main}", main),
            "all_tasks": score("mft-all", main),
        }
    failed = sorted(name for name, r in results.items() if r is None)
    return {"tasks": list(tasks), "runs": {n: (None if r is None else r.run_name) for n, r in results.items()},
            "rows": rows, "failed": failed}


def pairwise_markdown(grid: dict) -> str:
    tasks = grid["tasks"]
    lines = []
    for main in tasks:
        row = grid["rows"][main]
        lines.append(f"### {main}")
        lines.append("")
        lines.append("| Partner | Run | Score |")
        lines.append("|---|---|---|")
        for other, cell in row["pairs"].items():
            s = "failed" if cell["score"] is None else _fmt(100 * cell["score"])
            lines.append(f"| {other} | {cell['run']} | {s} |")
        for label, key in (("single-task baseline", "single_task"), ("all-task baseline", "all_tasks")):
            s = "failed" if row[key] is None else _fmt(100 * row[key])
            lines.append(f"| ({label}) | | {s} |")
        lines.append("")
    if grid["failed"]:
        lines.append("Failed runs: " + ", ".join(grid["failed"]))
        lines.append("")
    return "\n".join(lines)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                          encoding="utf-8")
