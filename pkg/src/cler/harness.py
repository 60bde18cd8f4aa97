"""Multi-seed orchestration, result files, summaries and comparison tables.

Every plan cell ``(arm, buffer size, seed)`` writes one JSON record to
``<out>/<arm>__buf<N>__seed<S>.jsonl``. ``summary.json`` aggregates them.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import itertools
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__, evaluation, introspection
from .config import DatasetSpec, ExperimentPlan
from .errors import ConfigError
from .methods import JOINT_METHODS, _seed_for, architecture_for, train_sequence
from .stream import (build_class_il_stream, iterate_task, load_dataset, load_image_folder,
                     make_synthetic_dataset)

log = logging.getLogger(__name__)

RESULT_FORMAT = "cler-result"
RESULT_VERSION = 1
RESULT_SUFFIX = ".jsonl"
FAILED_SUFFIX = ".failed.json"
SUMMARY_NAME = "summary.json"
WORKERS_ENV = "CLER_WORKERS"


def cell_id(arm_label: str, buffer_size: int, seed: int) -> str:
    return f"{arm_label}__buf{buffer_size}__seed{seed}"


@functools.lru_cache(maxsize=4)
def _load_data(spec_json: str):
    spec = DatasetSpec(**json.loads(spec_json))
    if spec.kind == "synthetic":
        data = make_synthetic_dataset(spec.num_classes, spec.per_class, spec.image_size, seed=spec.data_seed,
                                      test_per_class=spec.test_per_class, noise=spec.noise,
                                      contrast=spec.contrast)
    elif spec.kind == "folder":
        data = load_image_folder(spec.data_root, image_size=spec.image_size, test_fraction=spec.test_fraction,
                                 seed=spec.data_seed)
    else:
        data = load_dataset(spec.data_root)
    if spec.normalize_mean is not None or spec.normalize_std is not None:
        data = dataclasses.replace(data, mean=spec.normalize_mean, std=spec.normalize_std)
    return data


def build_stream(spec: DatasetSpec):
    data = _load_data(json.dumps(spec.to_dict(), sort_keys=True))
    if data.num_classes != spec.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, config says {spec.num_classes}")
    return build_class_il_stream(data, spec.num_tasks, seed=spec.data_seed,
                                 class_order=list(spec.class_order) if spec.class_order else None)


def _first_batches(stream, task, batch_size, count, seed):
    return list(itertools.islice(iterate_task(stream, task, batch_size, shuffle_seed=seed), count))


class _ProbeRecorder:
    """``after_task`` hook that runs the enabled probes on the live network."""

    def __init__(self, settings, config, seed):
        self.settings = settings
        self.config = config
        self.seed = seed
        self.records = []

    def _record(self, name, config, data):
        self.records.append({"probe": name, "config": config, "data": data})

    def __call__(self, t, net, stream):
        s, enabled = self.settings, set(self.settings.enabled)
        last = stream.num_tasks - 1
        joint = self.config.method in JOINT_METHODS
        bs = self.config.batch_size

        if "g" in enabled and not joint and t < last:
            classes = stream.classes_up_to(t + 1)
            b_i = _first_batches(stream, t, bs, s.batches, _seed_for(self.seed, 10, t))
            b_next = _first_batches(stream, t + 1, bs, s.batches, _seed_for(self.seed, 10, t + 1))
            try:
                cos = introspection.gradient_alignment(net, b_i, b_next, classes=classes)
            except ValueError:
                cos = None  # zero-norm gradient
            self._record("gradient_alignment", {"batches": s.batches, "batch_size": bs},
                         {"task_pair": [t, t + 1], "cosine": cos})

        if "r" in enabled:
            target = last if s.recovery_task is None else s.recovery_task
            if (t == target) or (joint and t == last):
                out = introspection.recovery_experiment(
                    net, stream, target, drop_fraction=s.drop_fraction, retrain_batches=s.retrain_batches,
                    lr=s.recovery_lr or self.config.lr, batch_size=bs, seed=_seed_for(self.seed, 11))
                self._record("recovery", {"drop_fraction": s.drop_fraction,
                                          "retrain_batches": s.retrain_batches},
                             {"task": out["task"], "pre_drop": out["pre_drop"], "trace": out["trace"],
                              "dropped": out["dropped"]})

        if t != last:
            return
        if "i" in enabled:
            batches = []
            for task in range(stream.num_tasks):
                batches += _first_batches(stream, task, bs, s.batches, _seed_for(self.seed, 12, task))
            imp = introspection.taylor_importance(net, batches)
            self._record("importance", {"batches_per_task": s.batches, "batch_size": bs},
                         {"filters_above_mean": introspection.above_mean_fraction(imp.filter),
                          "parameters_above_mean": introspection.parameter_above_mean_fraction(imp)})
        if "p" in enabled:
            report = introspection.layer_similarity_report(net)
            self._record("geometric_median", {"distance": "l2"},
                         {name: {"filter": idx, "g": g} for name, (idx, g) in report.items()})


def run_cell(plan: ExperimentPlan, arm, buffer_size: int, seed: int, config) -> dict:
    """Train one cell and return its result record (not yet written)."""
    stream = build_stream(plan.dataset)
    arch = architecture_for(stream, config, **plan.architecture)
    probes = _ProbeRecorder(plan.probes, config, seed)
    result = train_sequence(stream, config, seed, arch=arch, after_task=probes)
    record = {
        "format": RESULT_FORMAT,
        "version": RESULT_VERSION,
        "cell": cell_id(arm.label, buffer_size, seed),
        "arm": arm.label,
        "buffer_size": buffer_size,
        "seed": seed,
        "config": config.to_dict(),
        "dataset": plan.dataset.to_dict(),
        "architecture": dataclasses.asdict(arch),
        "class_il": result.class_il.to_nested(),
        "task_il": result.task_il.to_nested(),
        "metrics": _metrics(result.class_il, result.task_il),
        "diagonal": result.class_il.diagonal().tolist(),
        "pretext_accuracy": result.pretext_accuracy,
        "examples_per_task": result.examples_per_task,
        "loss_log": result.loss_log,
        "probes": probes.records,
        "wall_seconds": result.seconds,
        "software_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    return json.loads(json.dumps(record, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _metrics(class_il, task_il) -> dict:
    out = {}
    for mode, m in (("class_il", class_il), ("task_il", task_il)):
        forgetting = None
        if m.num_tasks >= 2 and not np.isnan(m.values[np.triu_indices(m.num_tasks)]).any():
            forgetting = evaluation.final_average_adjusted_forgetting(m)
        out[mode] = {"final_average_accuracy": evaluation.final_average_accuracy(m),
                     "final_average_adjusted_forgetting": forgetting}
    return out


def write_result(path: Path, record: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_result(path) -> dict:
    """Read a result file and check its metrics against its own matrices."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 1:
        raise ValueError(f"{path}: expected exactly one record, found {len(lines)}")
    record = json.loads(lines[0])
    if record.get("format") != RESULT_FORMAT:
        raise ValueError(f"{path}: not a result file")
    if record.get("version") != RESULT_VERSION:
        raise ValueError(f"{path}: unsupported result version {record.get('version')}")
    class_il = evaluation.AccuracyMatrix.from_nested(record["class_il"], "class_il")
    task_il = evaluation.AccuracyMatrix.from_nested(record["task_il"], "task_il")
    if _metrics(class_il, task_il) != record["metrics"]:
        raise ValueError(f"{path}: stored metrics do not match the stored accuracy matrices")
    return record


def _execute(args):
    plan, arm, buffer_size, seed, config, out_dir = args
    torch.set_num_threads(1)
    cid = cell_id(arm.label, buffer_size, seed)
    failed = Path(out_dir) / (cid + FAILED_SUFFIX)
    try:
        record = run_cell(plan, arm, buffer_size, seed, config)
    except Exception as err:  # recorded per cell, the run carries on
        failed.write_text(json.dumps({"cell": cid, "error": repr(err),
                                      "traceback": traceback.format_exc()}, indent=1))
        return cid, False
    write_result(Path(out_dir) / (cid + RESULT_SUFFIX), record)
    if failed.exists():
        failed.unlink()
    return cid, True


def _completed(path: Path, config) -> bool:
    if not path.exists():
        return False
    try:
        record = load_result(path)
    except (ValueError, KeyError, json.JSONDecodeError):
        return False
    return record["config"] == json.loads(json.dumps(config.to_dict()))


def run(plan: ExperimentPlan, resume: bool = False, workers: Optional[int] = None) -> int:
    """Execute every plan cell and write the summary. Returns the process exit code."""
    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    jobs, skipped = [], 0
    for arm, buf, seed, config in plan.cells():
        cid = cell_id(arm.label, buf, seed)
        if resume and _completed(out_dir / (cid + RESULT_SUFFIX), config):
            skipped += 1
            continue
        jobs.append((plan, arm, buf, seed, config, str(out_dir)))
    log.info("%d cells to run, %d already complete", len(jobs), skipped)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            outcomes = list(pool.map(_execute, jobs))
    else:
        threads = torch.get_num_threads()
        try:
            outcomes = [_execute(job) for job in jobs]
        finally:
            torch.set_num_threads(threads)
    failed = [cid for cid, ok in outcomes if not ok]
    for cid in failed:
        log.error("cell %s failed, see %s%s", cid, cid, FAILED_SUFFIX)

    wanted = {cell_id(arm.label, buf, seed) for arm, buf, seed, _ in plan.cells()}
    records = [load_result(out_dir / (cid + RESULT_SUFFIX)) for cid in sorted(wanted)
               if (out_dir / (cid + RESULT_SUFFIX)).exists()]
    if records:
        summary = summarize(records)
        summary["failed"] = sorted(failed)
        (out_dir / SUMMARY_NAME).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 1 if failed else 0


def load_results(result_dir) -> list:
    result_dir = Path(result_dir)
    if not result_dir.is_dir():
        raise FileNotFoundError(f"{result_dir} is not a directory")
    records = [load_result(p) for p in sorted(result_dir.glob("*" + RESULT_SUFFIX))]
    if not records:
        raise FileNotFoundError(f"no result files in {result_dir}")
    return records


def _group(records) -> dict:
    groups = {}
    for r in records:
        groups.setdefault((r["arm"], r["buffer_size"]), []).append(r)
    return groups


def summarize(records) -> dict:
    """Per ``(arm, buffer size)``: mean and std of final accuracy, mean forgetting, plus pairwise p-values."""
    groups = _group(records)
    rows = []
    acc = {}
    for (arm, buf), members in sorted(groups.items()):
        members = sorted(members, key=lambda r: r["seed"])
        a = np.array([m["metrics"]["class_il"]["final_average_accuracy"] for m in members])
        f = [m["metrics"]["class_il"]["final_average_adjusted_forgetting"] for m in members]
        t = np.array([m["metrics"]["task_il"]["final_average_accuracy"] for m in members])
        pre = [m["pretext_accuracy"] for m in members if m["pretext_accuracy"] is not None]
        acc[(arm, buf)] = a
        rows.append({
            "arm": arm,
            "buffer_size": buf,
            "n": len(members),
            "seeds": [m["seed"] for m in members],
            "final_average_accuracy": a.tolist(),
            "mean_accuracy": float(np.mean(a)),
            "std_accuracy": float(np.std(a, ddof=1)) if len(a) > 1 else None,
            "mean_forgetting": float(np.mean(f)) if None not in f else None,
            "mean_task_il_accuracy": float(np.mean(t)),
            "mean_pretext_accuracy": float(np.mean(pre)) if pre else None,
        })
    pairs = []
    for (ka, va), (kb, vb) in itertools.combinations(sorted(acc.items()), 2):
        p = evaluation.significance(va, vb) if len(va) > 1 and len(vb) > 1 else None
        pairs.append({"a": {"arm": ka[0], "buffer_size": ka[1]}, "b": {"arm": kb[0], "buffer_size": kb[1]},
                      "p_value": p})
    return {"software_version": __version__, "groups": rows, "pairwise": pairs}


def _p_lookup(summary, a, b):
    for pair in summary["pairwise"]:
        ends = {(pair["a"]["arm"], pair["a"]["buffer_size"]), (pair["b"]["arm"], pair["b"]["buffer_size"])}
        if ends == {a, b}:
            return pair["p_value"]
    return None


def _marker(p) -> str:
    if p is None:
        return ""
    return "**" if p < 0.01 else "*" if p < 0.05 else ""


def table_rows(summary) -> tuple:
    """Return ``(columns, rows)``; each row is ``(arm, {column: cell dict or None})``.

    Columns are the buffer sizes used by replay arms; buffer-free arms show
    the same values in every column. A CLER arm is marked when it beats the
    arm without the regularizer in the same column at p < 0.05 (``*``) or
    p < 0.01 (``**``).
    """
    groups = {(g["arm"], g["buffer_size"]): g for g in summary["groups"]}
    columns = sorted({b for _, b in groups if b > 0}) or [0]
    arms = list(dict.fromkeys(g["arm"] for g in summary["groups"]))
    rows = []
    for arm in arms:
        cells = {}
        for col in columns:
            key = (arm, col) if (arm, col) in groups else (arm, 0)
            g = groups.get(key)
            if g is None:
                cells[col] = None
                continue
            cell = dict(g, p_vs_base=None, marker="")
            base = arm.partition("+")[0]
            if base != arm and (base, key[1]) in groups:
                p = _p_lookup(summary, key, (base, key[1]))
                cell["p_vs_base"] = p
                if g["mean_accuracy"] > groups[(base, key[1])]["mean_accuracy"]:
                    cell["marker"] = _marker(p)
            cells[col] = cell
        rows.append((arm, cells))
    return columns, rows


def _fmt_cell(cell) -> str:
    if cell is None:
        return "n/a"
    text = f"{cell['mean_accuracy']:.2f}"
    if cell["std_accuracy"] is not None:
        text += f" ± {cell['std_accuracy']:.2f}"
    text += cell["marker"]
    if cell["mean_forgetting"] is not None:
        text += f" | {cell['mean_forgetting']:.2f}"
    return text


def report(result_dir, fmt: str = "text") -> str:
    """Comparison table of final accuracy (mean ± std) and forgetting per arm and buffer size."""
    summary = summarize(load_results(result_dir))
    columns, rows = table_rows(summary)
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["arm", "buffer_size", "n", "mean_accuracy", "std_accuracy", "mean_forgetting",
                         "mean_pretext_accuracy", "p_vs_base", "marker"])
        for arm, cells in rows:
            for col, c in cells.items():
                if c is None:
                    continue
                writer.writerow([arm, col, c["n"], repr(c["mean_accuracy"]),
                                 "" if c["std_accuracy"] is None else repr(c["std_accuracy"]),
                                 "" if c["mean_forgetting"] is None else repr(c["mean_forgetting"]),
                                 "" if c["mean_pretext_accuracy"] is None else repr(c["mean_pretext_accuracy"]),
                                 "" if c["p_vs_base"] is None else repr(c["p_vs_base"]), c["marker"]])
        return out.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    header = ["arm"] + [f"buffer {c}" if c else "no buffer" for c in columns]
    body = [[arm] + [_fmt_cell(cells[c]) for c in columns] for arm, cells in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("")
    lines.append("cells: mean final accuracy ± std | mean adjusted forgetting (class-IL, %)")
    lines.append("* p < 0.05, ** p < 0.01 gain over the same method without the regularizer")
    return "\n".join(lines) + "\n"


def export_probes(result_dir, out_dir=None) -> list:
    """Write plot-ready CSV files, one per probe kind, and return their paths."""
    records = load_results(result_dir)
    out_dir = Path(out_dir or result_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "per_task_accuracy": [["arm", "buffer_size", "seed", "task", "accuracy"]],
        "gradient_alignment": [["arm", "buffer_size", "seed", "task", "next_task", "cosine"]],
        "importance": [["arm", "buffer_size", "seed", "layer", "filters_above_mean", "parameters_above_mean"]],
        "geometric_median": [["arm", "buffer_size", "seed", "layer", "filter", "g"]],
        "recovery": [["arm", "buffer_size", "seed", "task", "step", "accuracy", "pre_drop"]],
    }
    for r in records:
        key = [r["arm"], r["buffer_size"], r["seed"]]
        for t, a in enumerate(r["diagonal"]):
            tables["per_task_accuracy"].append(key + [t, a])
        for p in r["probes"]:
            d = p["data"]
            if p["probe"] == "gradient_alignment":
                tables["gradient_alignment"].append(key + d["task_pair"] + [d["cosine"]])
            elif p["probe"] == "importance":
                for layer, frac in d["filters_above_mean"].items():
                    tables["importance"].append(key + [layer, frac, d["parameters_above_mean"][layer]])
            elif p["probe"] == "geometric_median":
                for layer, v in d.items():
                    tables["geometric_median"].append(key + [layer, v["filter"], v["g"]])
            elif p["probe"] == "recovery":
                for step, a in enumerate(d["trace"]):
                    tables["recovery"].append(key + [d["task"], step, a, d["pre_drop"]])
    written = []
    for name, rows in tables.items():
        if len(rows) == 1:
            continue
        path = out_dir / f"probe_{name}.csv"
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        written.append(path)
    return written
