"""Pixel-level confusion counts and micro-aggregated TPR / TNR / F1 tables."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import colorops


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class Metrics:
    tpr: float
    tnr: float
    f1: float
    degenerate: tuple[str, ...] = ()


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def _safe(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> Metrics:
    """0/0 ratios are reported as 0 and named in ``degenerate``."""
    flags: list[str] = []
    tpr = _safe(c.tp, c.tp + c.fn, "tpr", flags)
    tnr = _safe(c.tn, c.tn + c.fp, "tnr", flags)
    f1 = _safe(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", flags)
    return Metrics(tpr, tnr, f1, tuple(flags))


def aggregate(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


# --------------------------------------------------------------------------- runs

def group_key(record: dict, grouping: str):
    if grouping == "angle":
        return int(record["angle"])
    if grouping == "qf":
        history = record.get("qf_history") or []
        return int(history[0]) if history else "none"
    if grouping == "all":
        return "all"
    raise ValueError(f"unknown grouping {grouping!r}")


def prediction_path(pred_dir, case_id: str) -> Path:
    return Path(pred_dir) / f"{case_id}_mask.png"


@dataclass
class GroupResult:
    key: object
    cases: int
    counts: ConfusionCounts
    micro: Metrics
    macro: Metrics


@dataclass
class Report:
    grouping: str
    groups: list[GroupResult]
    overall: GroupResult
    missing: list[str]

    @property
    def complete(self) -> bool:
        return not self.missing

    def records(self) -> list[dict]:
        out = []
        for g in self.groups + [self.overall]:
            out.append({
                "grouping": self.grouping, "group": g.key, "cases": g.cases,
                **asdict(g.counts),
                "tpr": g.micro.tpr, "tnr": g.micro.tnr, "f1": g.micro.f1,
                "degenerate": list(g.micro.degenerate),
                "macro_tpr": g.macro.tpr, "macro_tnr": g.macro.tnr, "macro_f1": g.macro.f1,
            })
        return out

    def table(self, method: str = "") -> str:
        """Rows are metrics, columns are groups, values in percent."""
        keys = [str(g.key) for g in self.groups] + ["all"]
        results = self.groups + [self.overall]
        head = f"{(method or self.grouping) + ' / ' + self.grouping:>18} | " + " ".join(f"{k:>7}" for k in keys)
        lines = [head, "-" * len(head)]
        for name in ("tpr", "tnr", "f1"):
            vals = " ".join(f"{100 * getattr(r.micro, name):7.2f}" for r in results)
            lines.append(f"{name.upper():>18} | {vals}")
        if self.missing:
            lines.append(f"incomplete: {len(self.missing)} case(s) without prediction")
            lines += [f"  missing {cid}" for cid in self.missing]
        return "\n".join(lines)


def _macro(counts: Sequence[ConfusionCounts]) -> Metrics:
    if not counts:
        return Metrics(0.0, 0.0, 0.0, ("tpr", "tnr", "f1"))
    per = [metrics(c) for c in counts]
    return Metrics(float(np.mean([m.tpr for m in per])), float(np.mean([m.tnr for m in per])),
                   float(np.mean([m.f1 for m in per])))


def _group(key, counts: list[ConfusionCounts]) -> GroupResult:
    total = aggregate(counts)
    return GroupResult(key, len(counts), total, metrics(total), _macro(counts))


def evaluate_counts(records: Sequence[dict], counts: Sequence[ConfusionCounts | None],
                    grouping: str) -> Report:
    groups: dict = {}
    missing = []
    for rec, c in zip(records, counts):
        if c is None:
            missing.append(rec["case_id"])
            continue
        groups.setdefault(group_key(rec, grouping), []).append(c)
    order = sorted(groups, key=lambda k: (0, k, "") if isinstance(k, int) else (1, 0, str(k)))
    results = [_group(k, groups[k]) for k in order]
    overall = _group("all", [c for v in groups.values() for c in v])
    return Report(grouping, results, overall, sorted(missing))


def evaluate_run(records: Sequence[dict], pred_dir, grouping: str = "angle") -> Report:
    """Compare ``<case_id>_mask.png`` files in ``pred_dir`` with manifest masks."""
    counts = []
    for rec in records:
        path = prediction_path(pred_dir, rec["case_id"])
        if not path.is_file():
            counts.append(None)
            continue
        gt = colorops.read_mask(Path(rec.get("_root", ".")) / rec["mask"])
        counts.append(confusion(colorops.read_mask(path), gt))
    return evaluate_counts(records, counts, grouping)


def write_report(report: Report, out_dir, method: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / f"report_{report.grouping}.txt"
    table.write_text(report.table(method) + "\n")
    jsonl = out_dir / f"report_{report.grouping}.jsonl"
    jsonl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in report.records()))
    return table, jsonl
