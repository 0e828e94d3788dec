"""Plot-ready data files from solver, training and probe results.

Files and columns (stable):

``threshold_curve``
    ``b1, b1_minus_alpha, stop``: the generalized threshold curve on the belief
    grid; ``stop`` is 1 where the optimal action is to stop.
``value_function``
    ``b1, value``: the optimal value on the same grid.
``learning_curves``
    ``iteration`` then, for each metric, ``<metric>_seed<k>`` per seed followed
    by ``<metric>_mean`` and ``<metric>_std`` (population std across seeds).
``probe_surface``
    the probe axes in the order probed, ``stop_probability`` and, for
    stochastic neural policies, ``stop_log_odds``.

Nothing is written unless every requested file could be produced.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ReportError
from .solver import ThresholdAnalysis

CURVE_METRICS = (
    "policy_mean_episodic_reward",
    "policy_mean_episode_length",
    "policy_detection_probability",
    "policy_early_stopping_probability",
    "policy_mean_intrusion_to_stop_delay",
    "fixed6_mean_episodic_reward",
    "first_alert_mean_episodic_reward",
    "oracle_mean_episodic_reward",
)
FORMATS = ("csv", "json")


@dataclass
class ReportInputs:
    threshold: Optional[ThresholdAnalysis] = None
    curves: Optional[Mapping[int, Sequence[Mapping]]] = None  # seed -> per-iteration records
    probe: Optional[Mapping[str, Sequence[float]]] = None

    @property
    def empty(self) -> bool:
        return self.threshold is None and not self.curves and not self.probe


def _num(v) -> Optional[float]:
    if v is None or v == "":
        return None
    v = float(v)
    return None if math.isnan(v) else v


def threshold_tables(a: ThresholdAnalysis) -> Dict[str, Dict[str, list]]:
    return {
        "threshold_curve": {"b1": a.grid.tolist(), "b1_minus_alpha": a.curve.tolist(),
                            "stop": [int(v) for v in a.stop_mask]},
        "value_function": {"b1": a.grid.tolist(), "value": a.values.tolist()},
    }


def learning_curve_table(curves: Mapping[int, Sequence[Mapping]],
                         metrics: Sequence[str] = CURVE_METRICS) -> Dict[str, list]:
    """Per-seed columns plus mean and std, aligned on iteration.

    Seeds that ran fewer iterations leave blanks; mean and std use the seeds
    present at each iteration.
    """
    seeds = sorted(curves)
    by_seed = {s: {int(r["iteration"]): r for r in curves[s]} for s in seeds}
    iterations = sorted(set().union(*(set(v) for v in by_seed.values())))
    if not iterations:
        raise ReportError("learning curves contain no iterations")
    table: Dict[str, list] = {"iteration": iterations}
    for m in metrics:
        cols = {s: [_num(by_seed[s].get(i, {}).get(m)) for i in iterations] for s in seeds}
        for s in seeds:
            table[f"{m}_seed{s}"] = cols[s]
        means, stds = [], []
        for j in range(len(iterations)):
            vals = [cols[s][j] for s in seeds if cols[s][j] is not None]
            means.append(float(np.mean(vals)) if vals else None)
            stds.append(float(np.std(vals)) if vals else None)
        table[f"{m}_mean"] = means
        table[f"{m}_std"] = stds
    return table


def probe_table(probe: Mapping[str, Sequence[float]]) -> Dict[str, list]:
    return {k: np.asarray(v, dtype=float).tolist() for k, v in probe.items()}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return format(float(v), ".17g")


def table_csv(table: Mapping[str, list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(table)
    w.writerow(names)
    for row in zip(*(table[n] for n in names)):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def table_json(table: Mapping[str, list]) -> str:
    return json.dumps({"columns": list(table), "data": {k: list(v) for k, v in table.items()}}, indent=1) + "\n"


def read_table_csv(path) -> Dict[str, list]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ReportError(f"{path}: empty table")
    names = rows[0]
    return {n: [_num(r[i]) for r in rows[1:]] for i, n in enumerate(names)}


def build_tables(results: ReportInputs) -> Dict[str, Dict[str, list]]:
    if results is None or results.empty:
        raise ReportError("no results to report")
    tables: Dict[str, Dict[str, list]] = {}
    if results.threshold is not None:
        tables.update(threshold_tables(results.threshold))
    if results.curves:
        tables["learning_curves"] = learning_curve_table(results.curves)
    if results.probe:
        tables["probe_surface"] = probe_table(results.probe)
    return tables


def emit_report(results: ReportInputs, out_dir, fmt: str = "csv") -> List[str]:
    """Write every table to ``out_dir`` and return the paths written.

    All contents are rendered before anything touches the disk, and a failed
    write removes the files already placed.
    """
    if fmt not in FORMATS:
        raise ReportError(f"format must be one of {FORMATS}")
    tables = build_tables(results)
    render = table_csv if fmt == "csv" else table_json
    rendered = {f"{name}.{fmt}": render(t) for name, t in tables.items()}
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out_dir}: {exc.strerror}") from None
    written: List[str] = []
    tmp = None
    try:
        for name, text in rendered.items():
            path = os.path.join(out_dir, name)
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".tmp-")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
            tmp = None
            written.append(path)
    except OSError as exc:
        for path in written + ([tmp] if tmp else []):
            if os.path.exists(path):
                os.remove(path)
        raise ReportError(f"write failed: {exc}") from None
    return written
