"""Report objects and deterministic JSON/CSV emission."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION

COMPARATORS = {
    "<=": lambda v, tol: v <= tol,
    ">=": lambda v, tol: v >= tol,
    "<": lambda v, tol: v < tol,
    ">": lambda v, tol: v > tol,
}


@dataclass
class Metric:
    value: float
    tolerance: float | None = None
    comparator: str = "<="
    note: str = ""

    @property
    def passed(self) -> bool | None:
        if self.tolerance is None:
            return None
        v = float(self.value)
        if not math.isfinite(v):
            return False
        return bool(COMPARATORS[self.comparator](v, self.tolerance))

    def to_dict(self) -> dict:
        d = {"value": self.value, "tolerance": self.tolerance, "comparator": self.comparator,
             "passed": self.passed}
        if self.note:
            d["note"] = self.note
        return d


@dataclass
class Report:
    experiment: str
    params: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    status: str = "complete"

    def add(self, name: str, value, tolerance=None, comparator: str = "<=", note: str = "") -> Metric:
        m = Metric(float(value), tolerance, comparator, note)
        self.metrics[name] = m
        return m

    @property
    def passed(self) -> bool:
        flags = [m.passed for m in self.metrics.values() if m.passed is not None]
        return self.status == "complete" and all(flags)

    @property
    def failures(self) -> list[str]:
        return sorted(k for k, m in self.metrics.items() if m.passed is False)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "experiment": self.experiment,
                "seed": self.seed, "params": self.params, "status": self.status,
                "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
                "details": self.details, "artifacts": sorted(self.artifacts),
                "passed": self.passed}


# -- serialization -------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    s = format(x, ".17g")
    return s if any(ch in s for ch in ".en") else s + ".0"


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return {"re": o.real, "im": o.imag}
    if hasattr(o, "to_dict"):
        return o.to_dict()
    return o


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with sorted keys and floats at 17 significant digits."""
    obj = _plain(obj)
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                 for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_report(report: Report, out_dir, runtime: float | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(dumps(report.to_dict()) + "\n")
    if runtime is not None:
        # wall-clock time is kept out of report.json so reports stay byte-identical
        side = {"runtime_seconds": round(runtime, 3), "workers": worker_count()}
        (out / "runtime.json").write_text(json.dumps(side, sort_keys=True) + "\n")
    return path


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt_float(v).strip('"') if isinstance(v, float) else v for v in r])


# -- workers -----------------------------------------------------------------------------

def worker_count() -> int:
    raw = os.environ.get("SINGULAX_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def parallel_map(fn, items) -> list:
    """Ordered map; results never depend on the worker count."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))
