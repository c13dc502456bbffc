"""Benchmark metrics, failure bookkeeping and cross-model average ranking.

All generation metrics are computed on the original data scale.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .dataset import Dataset, Indices, SeriesTarget, TaskType

MAPE_ZERO_GUARD = 1e-12


class EmptyInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class Undefined(ArithmeticError):
    """MAPE over targets that are all (numerically) zero."""


class AllFailed(ArithmeticError):
    pass


class NoTasks(ValueError):
    pass


class UnknownInstanceId(KeyError):
    pass


# ---------------------------------------------------------------------------
# records


class FailureReason(str, enum.Enum):
    TLS = "TLS"  # input/output longer than the model supports
    TMC = "TMC"  # unsupported channel count
    INF = "INF"  # output of the wrong length or format
    OTHER = "OTHER"


@dataclass(frozen=True)
class Success:
    prediction: object  # str, TimeSeries, or array of (real-valued) indices


@dataclass(frozen=True)
class Failure:
    reason: FailureReason
    detail: str = ""


Outcome = Union[Success, Failure]


@dataclass(frozen=True)
class PredictionRecord:
    instance_id: str
    task_id: str
    outcome: Outcome

    @property
    def ok(self) -> bool:
        return isinstance(self.outcome, Success)


@dataclass(frozen=True)
class FailureMarker:
    completed: int
    total: int

    def __str__(self) -> str:
        return f"({self.completed}/{self.total})"


# ---------------------------------------------------------------------------
# understanding metrics


def _norm_label(s) -> str:
    return str(s).strip().casefold()


def accuracy(preds: Sequence, targets: Sequence) -> float:
    if len(preds) != len(targets):
        raise LengthMismatch(f"{len(preds)} predictions for {len(targets)} targets")
    if not targets:
        raise EmptyInput("accuracy of nothing")
    hits = sum(p is not None and _norm_label(p) == _norm_label(t) for p, t in zip(preds, targets))
    return hits / len(targets)


def _f1_for(preds, targets, cls) -> float:
    tp = sum(p == cls and t == cls for p, t in zip(preds, targets))
    fp = sum(p == cls and t != cls for p, t in zip(preds, targets))
    fn = sum(p != cls and t == cls for p, t in zip(preds, targets))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1(preds: Sequence, targets: Sequence, classes: Sequence, positive=None) -> float:
    """Positive-class F1 for two classes, macro F1 otherwise.

    ``positive`` defaults to ``classes[0]``.  Predictions outside ``classes``
    (including None for failed instances) never count as a hit.
    """
    if len(preds) != len(targets):
        raise LengthMismatch(f"{len(preds)} predictions for {len(targets)} targets")
    if not targets:
        raise EmptyInput("f1 of nothing")
    if len(classes) < 2:
        raise ValueError("f1 needs at least two classes")
    p = [None if x is None else _norm_label(x) for x in preds]
    t = [_norm_label(x) for x in targets]
    cls = [_norm_label(c) for c in classes]
    if len(cls) == 2:
        return _f1_for(p, t, _norm_label(classes[0] if positive is None else positive))
    return sum(_f1_for(p, t, c) for c in cls) / len(cls)


# ---------------------------------------------------------------------------
# generation metrics


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise LengthMismatch(f"pred {p.shape} vs target {t.shape}")
    return p, t


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    if p.size == 0:
        raise EmptyInput("mae of nothing")
    return float(np.mean(np.abs(t - p)))


def mape_with_excluded(pred, target) -> tuple[float, int]:
    """MAPE in percent plus the number of near-zero targets left out."""
    p, t = _pair(pred, target)
    keep = np.abs(t) >= MAPE_ZERO_GUARD
    if not keep.any():
        raise Undefined("all targets are zero")
    return float(100.0 * np.mean(np.abs((t[keep] - p[keep]) / t[keep]))), int((~keep).sum())


def mape(pred, target) -> float:
    return mape_with_excluded(pred, target)[0]


def success_rate(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise EmptyInput("success rate of nothing")
    return sum(r.ok for r in records) / len(records)


def swmape(mape_val: float, sr: float) -> float:
    if sr <= 0:
        raise AllFailed("no successful instances")
    return mape_val / sr


# ---------------------------------------------------------------------------
# ranking


@dataclass
class RankTable:
    models: list[str]
    tasks: list[str]
    ranks: dict[str, dict[str, float]]  # task -> model -> rank
    avg_rank: dict[str, float]

    def to_json(self) -> dict:
        return {
            "models": list(self.models),
            "tasks": list(self.tasks),
            "ranks": {t: {m: self.ranks[t][m] for m in self.models} for t in self.tasks},
            "avg_rank": {m: self.avg_rank[m] for m in self.models},
        }


def rank_task(values: dict[str, float | None], higher_better: bool) -> dict[str, float]:
    """Fractional ranks (1 = best); None (a failed model) ranks below every score."""
    scored = [(v, m) for m, v in values.items() if v is not None and not math.isnan(v)]
    failed = [m for m, v in values.items() if v is None or math.isnan(v)]
    scored.sort(key=lambda vm: -vm[0] if higher_better else vm[0])
    ranks: dict[str, float] = {}
    i = 0
    while i < len(scored):
        j = i
        while j + 1 < len(scored) and scored[j + 1][0] == scored[i][0]:
            j += 1
        r = (i + 1 + j + 1) / 2.0
        for k in range(i, j + 1):
            ranks[scored[k][1]] = r
        i = j + 1
    if failed:
        r = (len(scored) + 1 + len(values)) / 2.0
        for m in failed:
            ranks[m] = r
    return ranks


def avg_rank(
    per_task_scores: dict[str, dict[str, float | None]],
    directions: dict[str, str] | str,
) -> RankTable:
    """Rank models within each task, then average across tasks.

    ``per_task_scores`` maps model -> task -> value (None or missing = failed).
    ``directions`` maps task -> "higher" or "lower" (or one string for all).
    """
    models = sorted(per_task_scores)
    tasks = sorted({t for scores in per_task_scores.values() for t in scores})
    if not tasks:
        raise NoTasks("no tasks to rank")
    ranks = {}
    for t in tasks:
        d = directions if isinstance(directions, str) else directions[t]
        if d not in ("higher", "lower"):
            raise ValueError(f"direction for {t} must be 'higher' or 'lower'")
        ranks[t] = rank_task({m: per_task_scores[m].get(t) for m in models}, d == "higher")
    avg = {m: sum(ranks[t][m] for t in tasks) / len(tasks) for m in models}
    return RankTable(models, tasks, ranks, avg)


# ---------------------------------------------------------------------------
# scoring a run


@dataclass
class TaskScore:
    task_id: str
    task_type: TaskType
    discipline: str
    metrics: dict[str, float]
    n_total: int
    n_success: int
    failures: dict[str, int] = field(default_factory=dict)
    mape_excluded: int = 0

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_total

    @property
    def marker(self) -> FailureMarker | None:
        return FailureMarker(0, 1) if self.rank_value is None else None

    @property
    def rank_value(self) -> float | None:
        if self.task_type.is_understanding:
            return self.metrics.get("f1") if self.n_success else None
        return self.metrics.get("swmape")

    def to_json(self) -> dict:
        out = {
            "task_type": self.task_type.value,
            "discipline": self.discipline,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "n_total": self.n_total,
            "n_success": self.n_success,
            "failures": {k: self.failures[k] for k in sorted(self.failures)},
        }
        if not self.task_type.is_understanding:
            out["mape_excluded"] = self.mape_excluded
        if self.marker is not None:
            out["marker"] = str(self.marker)
        return out


def _label_of(target) -> str:
    return target.label if hasattr(target, "label") else target.choice


def score_task(instances, records: dict[str, PredictionRecord]) -> TaskScore:
    first = instances[0]
    tt = first.task_type
    recs = [records[i.id] for i in instances]
    n_success = sum(r.ok for r in recs)
    failures: dict[str, int] = {}
    for r in recs:
        if not r.ok:
            key = r.outcome.reason.value
            failures[key] = failures.get(key, 0) + 1
    sr = n_success / len(recs)
    metrics: dict[str, float] = {"success_rate": sr}
    excluded = 0
    if tt.is_understanding:
        targets = [_label_of(i.target) for i in instances]
        preds = [r.outcome.prediction if r.ok else None for r in recs]
        metrics["accuracy"] = accuracy(preds, targets)
        if tt is TaskType.MCQ:
            metrics["f1"] = metrics["accuracy"]
        else:
            classes = sorted({_norm_label(t) for t in targets})
            if tt is TaskType.ANOMALY_DETECTION and "yes" in classes:
                classes = ["yes"] + [c for c in classes if c != "yes"]
            if len(classes) < 2:
                classes = classes + ["<other>"]
            metrics["f1"] = f1(preds, targets, classes)
    else:
        maes, mapes = [], []
        for inst, r in zip(instances, recs):
            if not r.ok:
                continue
            pred, target = _generation_arrays(inst, r.outcome.prediction)
            maes.append(mae(pred, target))
            try:
                v, ex = mape_with_excluded(pred, target)
            except Undefined:
                excluded += target.size
                continue
            mapes.append(v)
            excluded += ex
        if maes:
            metrics["mae"] = float(np.mean(maes))
        if mapes:
            metrics["mape"] = float(np.mean(mapes))
            metrics["swmape"] = swmape(metrics["mape"], sr)
    return TaskScore(
        first.task_id, tt, first.discipline, metrics, len(recs), n_success, failures, excluded
    )


def _generation_arrays(inst, prediction) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(inst.target, Indices):
        target = np.asarray(inst.target.indices, dtype=np.float64)
        pred = np.rint(np.asarray(prediction, dtype=np.float64).reshape(-1))
        return pred, target
    assert isinstance(inst.target, SeriesTarget)
    pred = prediction.values if hasattr(prediction, "values") else np.asarray(prediction)
    return np.asarray(pred, dtype=np.float64), inst.target.series.values


@dataclass
class EvalReport:
    scores: dict[str, dict[str, TaskScore]]  # model -> task -> score
    rankings: dict[str, RankTable]  # "understanding" / "generation"
    manifest: dict

    def to_json(self) -> dict:
        return {
            "manifest": self.manifest,
            "models": {
                m: {t: self.scores[m][t].to_json() for t in sorted(self.scores[m])}
                for m in sorted(self.scores)
            },
            "rankings": {k: self.rankings[k].to_json() for k in sorted(self.rankings)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def rank_scores(scores: dict[str, dict[str, TaskScore]]) -> dict[str, RankTable]:
    out = {}
    for cat in ("understanding", "generation"):
        want_u = cat == "understanding"
        table = {
            m: {t: s.rank_value for t, s in tasks.items() if s.task_type.is_understanding == want_u}
            for m, tasks in scores.items()
        }
        if any(table.values()):
            out[cat] = avg_rank(table, "higher" if want_u else "lower")
    return out


def score_run(dataset: Dataset, records_by_model: dict[str, Sequence[PredictionRecord]]) -> EvalReport:
    known = dataset.by_id()
    scores: dict[str, dict[str, TaskScore]] = {}
    for model, recs in records_by_model.items():
        by_id = {}
        for r in recs:
            if r.instance_id not in known:
                raise UnknownInstanceId(r.instance_id)
            by_id[r.instance_id] = r
        missing = [i for i in known if i not in by_id]
        for iid in missing:
            by_id[iid] = PredictionRecord(iid, known[iid].task_id, Failure(FailureReason.OTHER, "no record"))
        scores[model] = {t: score_task(items, by_id) for t, items in dataset.by_task().items()}
    manifest = {k: {"count": n, "task_type": tt.value} for k, (n, tt) in dataset.manifest.items()}
    return EvalReport(scores, rank_scores(scores), manifest)


# ---------------------------------------------------------------------------
# text rendering


def _fmt(v: float) -> str:
    if v == 0 or 1e-2 <= abs(v) < 1e3:
        return f"{v:.1f}"
    return f"{v:.1e}".replace("e+0", "e").replace("e-0", "e-")


def discipline_cells(scores: dict[str, TaskScore], understanding: bool) -> dict[str, str]:
    """Mean metric per discipline, or "(completed/total)" if any task failed."""
    groups: dict[str, list[TaskScore]] = {}
    for s in scores.values():
        if s.task_type.is_understanding == understanding:
            groups.setdefault(s.discipline, []).append(s)
    out = {}
    for disc, items in sorted(groups.items()):
        vals = [s.rank_value for s in items]
        done = [v for v in vals if v is not None]
        if len(done) < len(vals):
            out[disc] = str(FailureMarker(len(done), len(vals)))
        else:
            mean = float(np.mean(done))
            out[disc] = _fmt(100.0 * mean if understanding else mean)
    return out


def render_text(scores: dict[str, dict[str, TaskScore]], rankings: dict[str, RankTable]) -> str:
    lines = []
    for cat, understanding, label in (
        ("understanding", True, "F1 (%; accuracy for MCQ)"),
        ("generation", False, "swMAPE (%)"),
    ):
        if cat not in rankings:
            continue
        cells = {m: discipline_cells(scores[m], understanding) for m in sorted(scores)}
        discs = sorted({d for c in cells.values() for d in c})
        tasks = rankings[cat].tasks
        header = ["model"] + discs + tasks + ["AvgRk"]
        rows = []
        for m in sorted(scores):
            row = [m] + [cells[m].get(d, "-") for d in discs]
            for t in tasks:
                s = scores[m].get(t)
                if s is None or s.rank_value is None:
                    row.append(str(FailureMarker(0, 1)))
                else:
                    row.append(_fmt(100.0 * s.rank_value if understanding else s.rank_value))
            row.append(f"{rankings[cat].avg_rank[m]:.1f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines.append(f"== {cat} tasks: {label} ==")
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        lines.append("")
    return "\n".join(lines)


def report_from_json(obj: dict) -> tuple[dict[str, dict[str, TaskScore]], dict]:
    """Rebuild TaskScores from a serialized EvalReport (for merging runs)."""
    scores = {}
    for m, tasks in obj["models"].items():
        scores[m] = {
            t: TaskScore(
                t,
                TaskType(s["task_type"]),
                s["discipline"],
                dict(s["metrics"]),
                int(s["n_total"]),
                int(s["n_success"]),
                dict(s.get("failures", {})),
                int(s.get("mape_excluded", 0)),
            )
            for t, s in tasks.items()
        }
    return scores, obj.get("manifest", {})
