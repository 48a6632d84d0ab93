"""Grounding success, SR / ASR and platform x kind breakdown tables."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .grounding import GroundingPrediction

PLATFORMS = ("mobile", "desktop", "web")
REPORT_KINDS = ("text", "icon/widget")
NA = None  # untargeted ASR when the clean SR is zero


def inside(point: tuple[float, float] | None, box: Sequence[float]) -> bool:
    """Boundary-inclusive point-in-box test in normalized units."""
    if point is None:
        return False
    x, y = point
    x0, y0, x1, y1 = box
    return x0 <= x <= x1 and y0 <= y <= y1


def success(pred: GroundingPrediction, gt: Sequence[float]) -> bool:
    return pred.valid and inside(pred.point(), gt)


@dataclass
class EvalRecord:
    sample_id: str
    condition: str
    prediction: GroundingPrediction
    gt_bbox: tuple[float, float, float, float]
    platform: str = ""
    kind: str = ""
    resolution: str = "native"
    target_region: tuple[float, float, float, float] | None = None
    errored: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return success(self.prediction, self.gt_bbox)

    @property
    def target_hit(self) -> bool | None:
        if self.target_region is None:
            return None
        return self.prediction.valid and inside(self.prediction.point(), self.target_region)

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "condition": self.condition,
            "resolution": self.resolution,
            "platform": self.platform,
            "kind": self.kind,
            "prediction": self.prediction.to_dict(),
            "gt_bbox": list(self.gt_bbox),
            "success": self.success,
            "errored": self.errored,
        }
        if self.target_region is not None:
            d["target_region"] = list(self.target_region)
            d["target_hit"] = self.target_hit
        if self.extras:
            d["extras"] = self.extras
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalRecord:
        tr = d.get("target_region")
        return cls(d["sample_id"], d["condition"], GroundingPrediction.from_dict(d["prediction"]),
                   tuple(d["gt_bbox"]), d.get("platform", ""), d.get("kind", ""),
                   d.get("resolution", "native"), tuple(tr) if tr is not None else None,
                   d.get("errored", False), d.get("extras", {}))


def sr(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("sr of an empty record set")
    return sum(r.success for r in records) / len(records)


def untargeted_asr(sr_clean: float, sr_attacked: float) -> float | None:
    """Relative SR drop, floored at 0; ``None`` when the clean SR is 0."""
    if sr_clean <= 0:
        return NA
    return max(0.0, (sr_clean - sr_attacked) / sr_clean)


def absolute_drop(sr_clean: float, sr_attacked: float) -> float:
    return max(0.0, sr_clean - sr_attacked)


def targeted_asr(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("targeted_asr of an empty record set")
    if any(r.target_region is None for r in records):
        raise ValueError("targeted_asr needs records with a target region")
    return sum(bool(r.target_hit) for r in records) / len(records)


# ------------------------------------------------------------------ tables


@dataclass
class ReportTable:
    """One row of a Table-1 style report: metric per (platform, kind) cell plus Avg."""

    label: str
    metric: str
    cells: dict[tuple[str, str], float | None]
    counts: dict[tuple[str, str], int]
    avg: float | None
    n: int
    block: str = ""

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "label": self.label,
            "metric": self.metric,
            "cells": {f"{p}/{k}": v for (p, k), v in self.cells.items()},
            "counts": {f"{p}/{k}": v for (p, k), v in self.counts.items()},
            "avg": self.avg,
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReportTable:
        def key(s):
            p, k = s.split("/", 1)
            return (p, k)

        return cls(d["label"], d["metric"], {key(k): v for k, v in d["cells"].items()},
                   {key(k): v for k, v in d["counts"].items()}, d["avg"], d["n"], d.get("block", ""))


def _cells():
    return [(p, k) for p in PLATFORMS for k in REPORT_KINDS]


def _group(records: Iterable[EvalRecord]) -> dict[tuple[str, str], list[EvalRecord]]:
    groups: dict[tuple[str, str], list[EvalRecord]] = {c: [] for c in _cells()}
    for r in records:
        key = (r.platform, r.kind)
        if key not in groups:
            raise ValueError(f"record {r.sample_id} has unknown platform/kind {key}")
        groups[key].append(r)
    return groups


def breakdown(records: Sequence[EvalRecord], metric: str = "sr", label: str = "",
              block: str = "") -> ReportTable:
    """Grouped SR (or targeted ASR) per cell; Avg weights every record equally."""
    fn = sr if metric == "sr" else targeted_asr
    groups = _group(records)
    cells = {c: (fn(rs) if rs else None) for c, rs in groups.items()}
    counts = {c: len(rs) for c, rs in groups.items()}
    avg = fn(records) if records else None
    return ReportTable(label or metric, metric, cells, counts, avg, len(records), block)


def asr_table(clean: ReportTable, attacked: ReportTable, label: str = "untargeted ASR",
              absolute: bool = False) -> ReportTable:
    """Untargeted ASR per cell from paired clean / attacked SR tables."""
    f = absolute_drop if absolute else untargeted_asr

    def cell(a, b):
        if a is None or b is None:
            return None
        return f(a, b)

    cells = {c: cell(clean.cells[c], attacked.cells[c]) for c in clean.cells}
    return ReportTable(label, "abs_drop" if absolute else "untargeted_asr", cells,
                       dict(attacked.counts), cell(clean.avg, attacked.avg), attacked.n, clean.block)


# ----------------------------------------------------------------- reports


def _pct(v) -> str:
    return "—" if v is None else f"{100.0 * v:.2f}"


def _header() -> list[str]:
    return ["block", "setting", "metric"] + [f"{p}/{k}" for p, k in _cells()] + ["avg", "n"]


def render_markdown(tables: Sequence[ReportTable], run_config: dict) -> str:
    out = io.StringIO()
    out.write("# Robustness report\n\n")
    out.write("```json\n" + json.dumps(run_config, indent=1, sort_keys=True) + "\n```\n\n")
    top = "| Resolution | Setting | Metric | " + " | ".join(
        f"{p.capitalize()} {('Text' if k == 'text' else 'Icon/Widget')}" for p, k in _cells()) + " | Avg |\n"
    out.write(top)
    out.write("|" + "---|" * (len(_cells()) + 4) + "\n")
    for t in tables:
        row = [t.block or "-", t.label, t.metric] + [_pct(t.cells[c]) for c in _cells()] + [_pct(t.avg)]
        out.write("| " + " | ".join(row) + " |\n")
    return out.getvalue()


def render_csv(tables: Sequence[ReportTable]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(_header())
    for t in tables:
        w.writerow([t.block, t.label, t.metric] + [_pct(t.cells[c]) for c in _cells()] + [_pct(t.avg), t.n])
    return out.getvalue()


def render_json(tables: Sequence[ReportTable], run_config: dict) -> str:
    return json.dumps({"run_config": run_config, "tables": [t.to_dict() for t in tables]},
                      indent=1, sort_keys=True) + "\n"


def emit_report(tables: Sequence[ReportTable], out_dir: str | os.PathLike, run_config: dict,
                formats: Sequence[str] = ("csv", "json", "markdown"), stem: str = "report") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            text, ext = "# run_config=" + json.dumps(run_config, sort_keys=True) + "\n" + render_csv(tables), "csv"
        elif fmt == "json":
            text, ext = render_json(tables, run_config), "json"
        elif fmt == "markdown":
            text, ext = render_markdown(tables, run_config), "md"
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        path = out_dir / f"{stem}.{ext}"
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


def write_records(records: Sequence[EvalRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_records(path: str | os.PathLike) -> list[EvalRecord]:
    with open(path, encoding="utf-8") as f:
        return [EvalRecord.from_dict(json.loads(line)) for line in f if line.strip()]
