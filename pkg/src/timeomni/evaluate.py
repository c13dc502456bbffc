"""Run a model over a dataset, turning per-instance errors into failure records."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backbone import ContextOverflow
from .dataset import Dataset, Indices, TaskInstance, TaskType, normalize
from .encoder import SignalTooLong
from .heads import LengthUnsupported
from .metrics import Failure, FailureReason, PredictionRecord, Success, accuracy
from .model import generation_units


class TooManyChannels(ValueError):
    pass


def classify_failure(exc: BaseException) -> FailureReason:
    if isinstance(exc, (SignalTooLong, ContextOverflow, LengthUnsupported)):
        return FailureReason.TLS
    if isinstance(exc, TooManyChannels):
        return FailureReason.TMC
    return FailureReason.OTHER


def _check_output(inst: TaskInstance, pred) -> Failure | None:
    if inst.task_type.is_understanding:
        return None if isinstance(pred, str) else Failure(FailureReason.INF, "no text output")
    values = pred.values if hasattr(pred, "values") else np.asarray(pred)
    want = inst.target_length
    if values.shape[-1] != want:
        return Failure(FailureReason.INF, f"length {values.shape[-1]} != {want}")
    if not np.isfinite(values).all():
        return Failure(FailureReason.INF, "non-finite output")
    return None


def evaluate_instance(model, inst: TaskInstance) -> PredictionRecord:
    try:
        pred = model.predict(inst)
    except Exception as exc:  # every per-instance error becomes a record
        return PredictionRecord(inst.id, inst.task_id, Failure(classify_failure(exc), str(exc)))
    bad = _check_output(inst, pred)
    if bad is not None:
        return PredictionRecord(inst.id, inst.task_id, bad)
    return PredictionRecord(inst.id, inst.task_id, Success(pred))


def run_model(model, dataset: Dataset, workers: int = 1) -> list[PredictionRecord]:
    """Records in dataset order regardless of ``workers``."""
    if workers <= 1:
        return [evaluate_instance(model, inst) for inst in dataset.instances]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: evaluate_instance(model, i), dataset.instances))


def toy_scores(model, held_out: Dataset) -> dict[str, float]:
    """Learning diagnostics on held-out toy data.

    ``classification_accuracy`` over CLASSIFICATION instances; ``forecast_nmse`` is
    the squared error divided by the variance of the matching input series,
    averaged per channel and then over forecasting instances; ``event_index_error``
    is the mean absolute error of the rounded predicted index.
    """
    preds, labels, nmse, idx = [], [], [], []
    for inst in held_out.instances:
        if inst.task_type is TaskType.CLASSIFICATION:
            preds.append(model.predict(inst))
            labels.append(inst.target.label)
        elif inst.task_type is TaskType.FORECASTING:
            out = np.atleast_2d(model.predict(inst).values)
            units = list(generation_units(inst))
            errs = []
            for row, (series, target, _) in zip(out, units):
                _, (_, std) = normalize(series.values.reshape(-1))
                errs.append(float(np.mean(((row - target) / std) ** 2)))
            nmse.append(float(np.mean(errs)))
        elif isinstance(inst.target, Indices):
            p = np.rint(np.asarray(model.predict(inst), dtype=np.float64))
            idx.append(float(np.mean(np.abs(p - np.asarray(inst.target.indices)))))
    return {
        "classification_accuracy": accuracy(preds, labels) if preds else float("nan"),
        "forecast_nmse": float(np.mean(nmse)) if nmse else float("nan"),
        "event_index_error": float(np.mean(idx)) if idx else float("nan"),
    }
