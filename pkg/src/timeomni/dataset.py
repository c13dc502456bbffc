"""Task schema, JSONL/sidecar I/O, flattening, normalization and the toy suite."""

from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAX_POINTS = 2**25
INLINE_LIMIT = 4096
STD_EPS = 1e-8


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class SchemaError(DatasetError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"schema violation in field {field!r}" + (f": {detail}" if detail else ""))
        self.field = field


class SidecarMissing(DatasetError):
    def __init__(self, path):
        super().__init__(f"sidecar not found: {path}")
        self.path = str(path)


class NonFiniteValue(DatasetError):
    def __init__(self, instance_id: str):
        super().__init__(f"non-finite value in instance {instance_id!r}")
        self.instance_id = instance_id


class TaskType(str, enum.Enum):
    ANOMALY_DETECTION = "AnomalyDetection"
    CLASSIFICATION = "Classification"
    MCQ = "MCQ"
    EVENT_LOCALISATION = "EventLocalisation"
    FORECASTING = "Forecasting"
    IMPUTATION = "Imputation"
    SYNTHESIS = "Synthesis"

    @property
    def is_understanding(self) -> bool:
        return self in _UNDERSTANDING


_UNDERSTANDING = {TaskType.ANOMALY_DETECTION, TaskType.CLASSIFICATION, TaskType.MCQ}


class TimeSeries:
    """Channels x length array of finite reals, held read-only."""

    __slots__ = ("values", "sample_rate_hz", "channel_names")

    def __init__(self, values, sample_rate_hz: float | None = None, channel_names=None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise SchemaError("values", f"expected non-empty channels x length, got {arr.shape}")
        if arr.size > MAX_POINTS:
            raise SchemaError("values", f"{arr.size} points exceeds cap {MAX_POINTS}")
        if sample_rate_hz is not None and not sample_rate_hz > 0:
            raise SchemaError("sample_rate_hz", "must be positive")
        if channel_names is not None:
            channel_names = tuple(channel_names)
            if len(channel_names) != arr.shape[0]:
                raise SchemaError("channel_names", "length differs from channel count")
        arr.setflags(write=False)
        self.values = arr
        self.sample_rate_hz = sample_rate_hz
        self.channel_names = channel_names

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and self.sample_rate_hz == other.sample_rate_hz
            and self.channel_names == other.channel_names
        )

    def __repr__(self) -> str:
        return f"TimeSeries(channels={self.channels}, length={self.length})"


@dataclass(frozen=True)
class TextLabel:
    label: str


@dataclass(frozen=True)
class McqChoice:
    choice: str

    def __post_init__(self):
        if self.choice not in ("A", "B", "C", "D"):
            raise SchemaError("target.choice", f"{self.choice!r} not in A-D")


@dataclass(frozen=True)
class SeriesTarget:
    series: TimeSeries


@dataclass(frozen=True)
class Indices:
    indices: tuple[int, ...]


Target = Union[TextLabel, McqChoice, SeriesTarget, Indices]


@dataclass(frozen=True)
class TaskInstance:
    id: str
    discipline: str
    task_id: str
    task_type: TaskType
    prompt: str
    input: TimeSeries | None
    target: Target
    norm_stats: tuple[float, float] | None = None

    def __post_init__(self):
        validate_instance(self)

    @property
    def target_length(self) -> int:
        if isinstance(self.target, SeriesTarget):
            return self.target.series.length
        if isinstance(self.target, Indices):
            return len(self.target.indices)
        raise SchemaError("target", "understanding targets have no length")


def validate_instance(inst: TaskInstance) -> None:
    if not isinstance(inst.task_type, TaskType):
        raise SchemaError("task_type", repr(inst.task_type))
    if inst.input is None:
        if inst.task_type is not TaskType.SYNTHESIS:
            raise SchemaError("input", f"{inst.task_type.value} requires an input series")
    elif not inst.input.is_finite():
        raise NonFiniteValue(inst.id)
    t = inst.target
    if inst.task_type.is_understanding:
        if not isinstance(t, (TextLabel, McqChoice)):
            raise SchemaError("target", f"{inst.task_type.value} needs a text or mcq target")
    elif not isinstance(t, (SeriesTarget, Indices)):
        raise SchemaError("target", f"{inst.task_type.value} needs a series or indices target")
    if isinstance(t, SeriesTarget):
        if not t.series.is_finite():
            raise NonFiniteValue(inst.id)
        if inst.input is not None and t.series.channels not in (1, inst.input.channels):
            raise SchemaError("target", "series target channels must be 1 or match input")
    if isinstance(t, Indices):
        if inst.input is None:
            raise SchemaError("target", "indices target needs an input series")
        if any(i < 0 or i >= inst.input.length for i in t.indices):
            raise SchemaError("target.indices", "index outside input length")


@dataclass(frozen=True)
class Dataset:
    instances: tuple[TaskInstance, ...]
    manifest: dict[str, tuple[int, TaskType]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [i.id for i in self.instances]
        if len(set(ids)) != len(ids):
            dup = next(k for k, v in Counter(ids).items() if v > 1)
            raise SchemaError("id", f"duplicate id {dup!r}")
        expected = build_manifest(self.instances)
        if not self.manifest:
            object.__setattr__(self, "manifest", expected)
        elif self.manifest != expected:
            raise SchemaError("manifest", "counts do not match instances")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def by_id(self) -> dict[str, TaskInstance]:
        return {i.id: i for i in self.instances}

    def by_task(self) -> dict[str, list[TaskInstance]]:
        out: dict[str, list[TaskInstance]] = {}
        for inst in self.instances:
            out.setdefault(inst.task_id, []).append(inst)
        return out


def build_manifest(instances) -> dict[str, tuple[int, TaskType]]:
    manifest: dict[str, tuple[int, TaskType]] = {}
    for inst in instances:
        n, tt = manifest.get(inst.task_id, (0, inst.task_type))
        if tt is not inst.task_type:
            raise SchemaError("task_type", f"task {inst.task_id} mixes task types")
        manifest[inst.task_id] = (n + 1, tt)
    return manifest


def manifest_json(ds: Dataset) -> dict:
    return {k: {"count": n, "task_type": tt.value} for k, (n, tt) in ds.manifest.items()}


# ---------------------------------------------------------------------------
# flattening and normalization


def flatten_input(x: TimeSeries) -> np.ndarray:
    """Channel-major concatenation: all of channel 0, then channel 1, ..."""
    return x.values.reshape(-1).copy()


def unflatten(flat: np.ndarray, channels: int) -> np.ndarray:
    return np.asarray(flat).reshape(channels, -1)


def normalize(signal) -> tuple[np.ndarray, tuple[float, float]]:
    signal = np.asarray(signal, dtype=np.float64)
    mean = float(signal.mean())
    std = max(float(signal.std()), STD_EPS)
    return (signal - mean) / std, (mean, std)


def denormalize(normalized, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return np.asarray(normalized, dtype=np.float64) * std + mean


# ---------------------------------------------------------------------------
# JSONL I/O


def _series_to_json(ts: TimeSeries, sidecar_dir: Path, base: Path, stem: str) -> dict:
    if ts.values.size <= INLINE_LIMIT:
        values = ts.values.tolist()
    else:
        sidecar_dir.mkdir(parents=True, exist_ok=True)
        path = sidecar_dir / f"{stem}.f32"
        path.write_bytes(ts.values.astype("<f4").tobytes())
        values = {
            "sidecar": path.relative_to(base).as_posix(),
            "channels": ts.channels,
            "length": ts.length,
        }
    out = {"values": values, "sample_rate_hz": ts.sample_rate_hz}
    if ts.channel_names is not None:
        out["channel_names"] = list(ts.channel_names)
    return out


def instance_to_json(inst: TaskInstance, sidecar_dir: Path, base: Path) -> dict:
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in inst.id)
    t = inst.target
    if isinstance(t, TextLabel):
        target = {"kind": "text", "label": t.label}
    elif isinstance(t, McqChoice):
        target = {"kind": "mcq", "choice": t.choice}
    elif isinstance(t, SeriesTarget):
        target = {"kind": "series", **_series_to_json(t.series, sidecar_dir, base, safe + "_target")}
    else:
        target = {"kind": "indices", "indices": list(t.indices)}
    obj = {
        "id": inst.id,
        "discipline": inst.discipline,
        "task_id": inst.task_id,
        "task_type": inst.task_type.value,
        "prompt": inst.prompt,
        "input": None
        if inst.input is None
        else _series_to_json(inst.input, sidecar_dir, base, safe + "_input"),
        "target": target,
    }
    if inst.norm_stats is not None:
        obj["norm_stats"] = list(inst.norm_stats)
    return obj


def write_dataset(ds: Dataset, path) -> None:
    """Write JSONL; long series go to ``<stem>_sidecars/`` next to the file."""
    path = Path(path)
    base = path.parent
    sidecar_dir = base / f"{path.stem}_sidecars"
    lines = [
        json.dumps(instance_to_json(inst, sidecar_dir, base), ensure_ascii=False)
        for inst in ds.instances
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _require(obj: dict, key: str, kind, where: str = ""):
    name = f"{where}{key}"
    if key not in obj:
        raise SchemaError(name, "missing")
    val = obj[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise SchemaError(name, f"expected {kind}, got {type(val).__name__}")
    return val


def _series_from_json(obj, base: Path, where: str, inst_id: str) -> TimeSeries:
    if not isinstance(obj, dict):
        raise SchemaError(where, "expected an object")
    values = obj.get("values")
    if isinstance(values, dict):
        rel = _require(values, "sidecar", str, where + ".values.")
        ch = _require(values, "channels", int, where + ".values.")
        n = _require(values, "length", int, where + ".values.")
        p = base / rel
        if not p.is_file():
            raise SidecarMissing(p)
        raw = p.read_bytes()
        if len(raw) != 4 * ch * n:
            raise SchemaError(where + ".values.sidecar", f"expected {ch * n} f32 values")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(ch, n)
    elif isinstance(values, list):
        try:
            arr = np.array(values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise SchemaError(where + ".values", str(exc)) from None
        if arr.ndim != 2:
            raise SchemaError(where + ".values", "expected a list of channels")
    else:
        raise SchemaError(where + ".values", "missing or wrong type")
    if not np.isfinite(arr).all():
        raise NonFiniteValue(inst_id)
    sr = obj.get("sample_rate_hz")
    if sr is not None and not isinstance(sr, (int, float)):
        raise SchemaError(where + ".sample_rate_hz", "expected number or null")
    return TimeSeries(arr, None if sr is None else float(sr), obj.get("channel_names"))


def instance_from_json(obj: dict, base: Path) -> TaskInstance:
    if not isinstance(obj, dict):
        raise SchemaError("<root>", "expected an object")
    iid = _require(obj, "id", str)
    tt_raw = _require(obj, "task_type", str)
    try:
        tt = TaskType(tt_raw)
    except ValueError:
        raise SchemaError("task_type", f"unknown {tt_raw!r}") from None
    inp = obj.get("input", None)
    series = None if inp is None else _series_from_json(inp, base, "input", iid)
    tobj = _require(obj, "target", dict)
    kind = _require(tobj, "kind", str, "target.")
    if kind == "text":
        target = TextLabel(_require(tobj, "label", str, "target."))
    elif kind == "mcq":
        target = McqChoice(_require(tobj, "choice", str, "target."))
    elif kind == "series":
        target = SeriesTarget(_series_from_json(tobj, base, "target", iid))
    elif kind == "indices":
        idx = _require(tobj, "indices", list, "target.")
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in idx):
            raise SchemaError("target.indices", "expected integers")
        target = Indices(tuple(idx))
    else:
        raise SchemaError("target.kind", f"unknown {kind!r}")
    ns = obj.get("norm_stats")
    return TaskInstance(
        id=iid,
        discipline=_require(obj, "discipline", str),
        task_id=_require(obj, "task_id", str),
        task_type=tt,
        prompt=_require(obj, "prompt", str),
        input=series,
        target=target,
        norm_stats=None if ns is None else (float(ns[0]), float(ns[1])),
    )


def load_dataset(path) -> Dataset:
    path = Path(path)
    base = path.parent
    instances = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, exc.msg) from None
            instances.append(instance_from_json(obj, base))
    return Dataset(tuple(instances))


# ---------------------------------------------------------------------------
# toy suite

TOY_TASKS = {
    # family key: (task_id, task type)
    "classification": ("CLS01", TaskType.CLASSIFICATION),
    "anomaly": ("ANO01", TaskType.ANOMALY_DETECTION),
    "mcq": ("MCQ01", TaskType.MCQ),
    "forecasting": ("FOR01", TaskType.FORECASTING),
    "forecasting_mv": ("FOR02", TaskType.FORECASTING),
    "imputation": ("IMP01", TaskType.IMPUTATION),
    "event": ("EVL01", TaskType.EVENT_LOCALISATION),
    "synthesis": ("SYN01", TaskType.SYNTHESIS),
}
# generation pools set the epoch length; the understanding pools are larger
# because they are consumed six at a time
DEFAULT_TOY_SIZES = {
    "classification": 250,
    "anomaly": 60,
    "mcq": 60,
    "forecasting": 240,
    "forecasting_mv": 40,
    "imputation": 40,
    "event": 160,
    "synthesis": 20,
}
WAVE_LABELS = ("sine", "square", "sawtooth")
TREND_OPTIONS = ("rising", "falling", "flat", "oscillating")
FORECAST_HORIZONS = (8, 24, 96)
SYNTH_LENGTHS = (16, 32, 48, 64)
SYNTH_SLOPE = 0.1
SINE_PERIODS = (16, 24, 32, 48)


def _sine(rng, length, noise=0.03, extra=0):
    period = float(rng.choice(SINE_PERIODS))
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.5, 2.0)
    offset = rng.uniform(-1.0, 1.0)
    t = np.arange(length + extra)
    clean = offset + amp * np.sin(2 * np.pi * t / period + phase)
    return clean + noise * amp * rng.standard_normal(length + extra)


def _wave(rng, kind: str, length: int) -> np.ndarray:
    period = rng.uniform(20.0, 60.0)
    phase = rng.uniform(0, 1)
    u = (np.arange(length) / period + phase) % 1.0
    if kind == "sine":
        base = np.sin(2 * np.pi * u)
    elif kind == "square":
        base = np.where(u < 0.5, 1.0, -1.0)
    else:
        base = 2.0 * u - 1.0
    amp = rng.uniform(0.5, 2.0)
    return rng.uniform(-1, 1) + amp * base + 0.05 * amp * rng.standard_normal(length)


def _gen_classification(rng, i):
    kind = WAVE_LABELS[rng.integers(3)]
    x = _wave(rng, kind, 300)
    return "Which waveform: sine, square or sawtooth?", TimeSeries(x), TextLabel(kind)


def _gen_anomaly(rng, i):
    x = _sine(rng, 256)
    spiked = bool(rng.integers(2))
    if spiked:
        start = int(rng.integers(20, 226))
        width = int(rng.integers(5, 11))
        x[start : start + width] += rng.choice([-1, 1]) * 3.0 * x.std()
    return "Is there an anomaly? yes or no.", TimeSeries(x), TextLabel("yes" if spiked else "no")


def _trend(rng, kind: str, length: int) -> np.ndarray:
    t = np.linspace(0, 1, length)
    noise = 0.1 * rng.standard_normal(length)
    if kind == "rising":
        return rng.uniform(1.0, 3.0) * t + noise
    if kind == "falling":
        return -rng.uniform(1.0, 3.0) * t + noise
    if kind == "flat":
        return np.full(length, rng.uniform(-1, 1)) + noise
    return np.sin(2 * np.pi * t * rng.uniform(4, 8)) + noise


def _gen_mcq(rng, i):
    truth = TREND_OPTIONS[rng.integers(4)]
    order = list(rng.permutation(4))
    options = [TREND_OPTIONS[k] for k in order]
    letter = "ABCD"[options.index(truth)]
    prompt = "Trend? " + " ".join(f"{c}) {o}" for c, o in zip("ABCD", options))
    return prompt, TimeSeries(_trend(rng, truth, 200)), McqChoice(letter)


def _gen_forecasting(rng, i):
    h = FORECAST_HORIZONS[rng.integers(len(FORECAST_HORIZONS))]
    full = _sine(rng, 192, extra=h)
    return (
        f"Forecast the next {h} points.",
        TimeSeries(full[:192]),
        SeriesTarget(TimeSeries(full[192:])),
    )


def _gen_forecasting_mv(rng, i):
    h = 24
    chans = [_sine(rng, 128, extra=h) for _ in range(3)]
    full = np.stack(chans)
    return (
        f"Forecast the next {h} points of each channel.",
        TimeSeries(full[:, :128], channel_names=("x", "y", "z")),
        SeriesTarget(TimeSeries(full[:, 128:])),
    )


def _gen_imputation(rng, i):
    x = _sine(rng, 128)
    m = 16
    start = int(rng.integers(40, 73))
    target = x[start : start + m].copy()
    x[start : start + m] = 0.0
    return (
        f"Fill the {m} missing values from index {start}.",
        TimeSeries(x),
        SeriesTarget(TimeSeries(target)),
    )


def _gen_event(rng, i):
    n = 64
    k = int(rng.integers(8, 57))
    x = 0.2 * rng.standard_normal(n)
    x[k:] += rng.choice([-1, 1]) * rng.uniform(2.0, 4.0)
    x += rng.uniform(-1, 1)
    return "Find the index of the level shift.", TimeSeries(x), Indices((k,))


def synthesis_series(length: int) -> np.ndarray:
    return 1.0 + SYNTH_SLOPE * np.arange(length)


def _gen_synthesis(rng, i):
    n = SYNTH_LENGTHS[rng.integers(len(SYNTH_LENGTHS))]
    return f"rising linear trend of length {n}", None, SeriesTarget(TimeSeries(synthesis_series(n)))


_GENERATORS = {
    "classification": _gen_classification,
    "anomaly": _gen_anomaly,
    "mcq": _gen_mcq,
    "forecasting": _gen_forecasting,
    "forecasting_mv": _gen_forecasting_mv,
    "imputation": _gen_imputation,
    "event": _gen_event,
    "synthesis": _gen_synthesis,
}


def generate_toy_suite(seed: int, sizes: dict[str, int] | None = None) -> Dataset:
    """Deterministic synthetic dataset covering all seven task types."""
    sizes = dict(DEFAULT_TOY_SIZES if sizes is None else sizes)
    unknown = set(sizes) - set(TOY_TASKS)
    if unknown:
        raise ValueError(f"unknown toy families: {sorted(unknown)}")
    instances = []
    for fam_idx, (family, (task_id, tt)) in enumerate(TOY_TASKS.items()):
        n = sizes.get(family, 0)
        if n < 0:
            raise ValueError(f"size for {family} must be positive")
        rng = np.random.default_rng([seed, fam_idx])
        for i in range(n):
            prompt, series, target = _GENERATORS[family](rng, i)
            instances.append(
                TaskInstance(
                    id=f"{task_id}-{i:05d}",
                    discipline="toy",
                    task_id=task_id,
                    task_type=tt,
                    prompt=prompt,
                    input=series,
                    target=target,
                )
            )
    return Dataset(tuple(instances))


def split_holdout(ds: Dataset, frac: float = 0.2) -> tuple[Dataset, Dataset]:
    """Per task, the last ``ceil(frac * n)`` instances become the held-out set."""
    train, test = [], []
    for items in ds.by_task().values():
        k = math.ceil(frac * len(items)) if len(items) > 1 else 0
        train.extend(items[: len(items) - k])
        test.extend(items[len(items) - k :])
    return Dataset(tuple(train)), Dataset(tuple(test))
