"""Overall accuracy, corruption error (CE) and its mean over corruption kinds (mCE)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .corruptions import ATOMIC_KINDS, SEVERITIES, CorruptionKind
from .exceptions import UndefinedBaselineError, ValidationError

__all__ = [
    "overall_accuracy", "corruption_error", "mean_ce", "BaselineTable", "EvalReport",
    "build_report", "render_table", "COLUMN_TITLES",
]

COLUMN_TITLES = {
    CorruptionKind.SCALE: "Scale",
    CorruptionKind.JITTER: "Jitter",
    CorruptionKind.DROP_GLOBAL: "Drop-G",
    CorruptionKind.DROP_LOCAL: "Drop-L",
    CorruptionKind.ADD_GLOBAL: "Add-G",
    CorruptionKind.ADD_LOCAL: "Add-L",
    CorruptionKind.ROTATE: "Rotate",
}


def overall_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError(f"{predictions.size} predictions for {labels.size} labels")
    if predictions.size == 0:
        raise ValidationError("overall accuracy of an empty set is undefined")
    return float(np.count_nonzero(predictions == labels)) / predictions.size


def corruption_error(oa_by_severity: Sequence[float], baseline: Sequence[float]) -> float:
    """Summed error mass over the severities, relative to the baseline's."""
    oa = np.asarray(oa_by_severity, dtype=np.float64)
    base = np.asarray(baseline, dtype=np.float64)
    if oa.shape != (5,) or base.shape != (5,):
        raise ValidationError(f"need 5 accuracies per corruption, got {oa.shape[0]} and {base.shape[0]}")
    denom = float(np.sum(1.0 - base))
    if denom == 0.0:
        raise UndefinedBaselineError("baseline accuracies are all 1: corruption error is undefined")
    return float(np.sum(1.0 - oa)) / denom


def mean_ce(ce: Sequence[float]) -> float:
    values = [float(x) for x in ce]
    if len(values) != len(ATOMIC_KINDS):
        raise ValidationError(f"mCE averages exactly {len(ATOMIC_KINDS)} corruption errors, got {len(values)}")
    return sum(values) / len(values)


@dataclass
class BaselineTable:
    """Reference accuracy per (corruption kind, severity); the CE denominator."""

    entries: dict
    name: str = "custom"

    def __post_init__(self):
        parsed = {}
        for key, value in self.entries.items():
            kind, severity = key if isinstance(key, tuple) else _split_set_name(key)
            parsed[(CorruptionKind.parse(kind), int(severity))] = float(value)
        missing = [f"{k.value}_{s}" for k in ATOMIC_KINDS for s in SEVERITIES if (k, s) not in parsed]
        if missing:
            raise ValidationError(f"baseline table is missing entries: {', '.join(missing)}")
        bad = [f"{k.value}_{s}" for (k, s), v in parsed.items() if not 0 < v < 1]
        if bad:
            raise ValidationError(f"baseline accuracies must lie in (0, 1): {', '.join(bad)}")
        self.entries = parsed

    @classmethod
    def identity(cls) -> "BaselineTable":
        """Not a real model: every entry 0.8, so each denominator is 1 and CE is the raw error mass."""
        return cls({(k, s): 0.8 for k in ATOMIC_KINDS for s in SEVERITIES}, name="identity (not DGCNN)")

    def row(self, kind) -> list[float]:
        kind = CorruptionKind.parse(kind)
        return [self.entries[(kind, s)] for s in SEVERITIES]

    @classmethod
    def load(cls, path) -> "BaselineTable":
        """JSON object ``{"name": ..., "entries": {"scale_1": 0.9, ...}}`` or a flat entries object."""
        data = json.loads(Path(path).read_text())
        if "entries" in data:
            return cls(data["entries"], name=data.get("name", Path(path).stem))
        return cls(data, name=Path(path).stem)

    def to_dict(self) -> dict:
        return {"name": self.name, "entries": {f"{k.value}_{s}": v for (k, s), v in sorted(
            self.entries.items(), key=lambda kv: (ATOMIC_KINDS.index(kv[0][0]), kv[0][1]))}}


def _split_set_name(name: str) -> tuple[str, int]:
    kind, _, severity = str(name).rpartition("_")
    if not kind or not severity.isdigit():
        raise ValidationError(f"set name {name!r} is not of the form <kind>_<severity>")
    return kind, int(severity)


@dataclass
class EvalReport:
    clean_oa: Optional[float]
    oa: dict                 # "<kind>_<severity>" -> OA
    ce: dict = field(default_factory=dict)
    baseline: str = ""
    model: str = ""

    @property
    def moa(self) -> float:
        return float(np.mean([self.oa[f"{k.value}_{s}"] for k in ATOMIC_KINDS for s in SEVERITIES]))

    @property
    def mce(self) -> float:
        return mean_ce([self.ce[k.value] for k in ATOMIC_KINDS])

    def kind_oa(self, kind) -> float:
        kind = CorruptionKind.parse(kind)
        return float(np.mean([self.oa[f"{kind.value}_{s}"] for s in SEVERITIES]))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "baseline": self.baseline,
            "clean_oa": self.clean_oa,
            "oa": dict(self.oa),
            "ce": dict(self.ce),
            "moa": self.moa,
            "mce": self.mce,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(d.get("clean_oa"), dict(d["oa"]), dict(d["ce"]), d.get("baseline", ""), d.get("model", ""))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(set_oa: Mapping[str, float], baseline: BaselineTable, model: str = "") -> EvalReport:
    """Assemble an :class:`EvalReport` from per-set accuracies keyed ``clean`` / ``<kind>_<severity>``."""
    missing = [f"{k.value}_{s}" for k in ATOMIC_KINDS for s in SEVERITIES if f"{k.value}_{s}" not in set_oa]
    if missing:
        raise ValidationError(f"missing corrupted sets: {', '.join(missing)}")
    oa = {f"{k.value}_{s}": float(set_oa[f"{k.value}_{s}"]) for k in ATOMIC_KINDS for s in SEVERITIES}
    ce = {
        k.value: corruption_error([oa[f"{k.value}_{s}"] for s in SEVERITIES], baseline.row(k))
        for k in ATOMIC_KINDS
    }
    clean = set_oa.get("clean")
    return EvalReport(None if clean is None else float(clean), oa, ce, baseline.name, model)


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text grid: one OA table and one CE table, corruption columns in the standard order."""
    names = [r.model or f"model{i}" for i, r in enumerate(reports)]
    width = max([5] + [len(n) for n in names])
    cols = [COLUMN_TITLES[k] for k in ATOMIC_KINDS]

    def line(label, values):
        return f"{label:<{width}} | " + " ".join(f"{v:>7}" for v in values)

    out = [line("OA", ["Clean", "mOA"] + cols)]
    out.append("-" * len(out[0]))
    for name, r in zip(names, reports):
        clean = "-" if r.clean_oa is None else f"{r.clean_oa:.3f}"
        out.append(line(name, [clean, f"{r.moa:.3f}"] + [f"{r.kind_oa(k):.3f}" for k in ATOMIC_KINDS]))
    out.append("")
    header = line("CE", ["mCE", ""] + cols)
    out.append(header)
    out.append("-" * len(header))
    for name, r in zip(names, reports):
        out.append(line(name, [f"{r.mce:.3f}", ""] + [f"{r.ce[k.value]:.3f}" for k in ATOMIC_KINDS]))
    return "\n".join(out)
