"""Sensor deployments, synthetic data with planted ground truth, CSV
ingestion, windowed segmentation, and meta-segmented fold assignment.

The synthetic generator plants a per-activity set of informative data
sources: their channels carry a sinusoid (with per-window jitter, optionally
AR(1)-correlated across adjacent windows) while every other channel carries
pure Gaussian noise. Each source is passed through a measurement model
(transfer function, drift, noise, dropout gaps), so recovered importances can
be checked against the planted truth.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .hyperspace import derive_rng

NULL_LABEL = "null"

# Input/output relation of a type-B-style thermocouple over 0..1820 degC,
# returning millivolts; no constant term, so V(0) == 0 exactly.
THERMO_COEFFS = (
    -2.4674601620e-1,
    5.9102111169e-3,
    -1.4307123430e-6,
    2.1509149750e-9,
    -3.1757800720e-12,
    2.4010367459e-15,
    -9.0928148159e-19,
    1.3299505137e-22,
)


class SensorError(ValueError):
    pass


class IngestError(ValueError):
    pass


def thermocouple_transfer(T):
    """Thermocouple output in mV for temperatures in [0, 1820] degC."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0.0) or np.any(T > 1820.0):
        raise SensorError("temperature outside the 0-1820 degC range")
    acc = np.zeros_like(T)
    for c in reversed(THERMO_COEFFS):
        acc = (acc + c) * T
    out = acc * 1e-3
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DataSource:
    id: str
    position: str
    modality: str
    channels: int = 1


@dataclass(frozen=True)
class Deployment:
    sources: tuple[DataSource, ...]
    sampling_rate: float

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.sampling_rate <= 0 or not self.sources:
            raise SensorError("deployment needs a positive rate and >= 1 source")
        seen = set()
        for s in self.sources:
            if (s.position, s.modality) in seen:
                raise SensorError(f"duplicate (position, modality): {s.position}/{s.modality}")
            seen.add((s.position, s.modality))

    @property
    def n_channels(self) -> int:
        return sum(s.channels for s in self.sources)

    @property
    def source_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.sources)

    def channel_slice(self, source_id: str) -> slice:
        off = 0
        for s in self.sources:
            if s.id == source_id:
                return slice(off, off + s.channels)
            off += s.channels
        raise KeyError(source_id)

    def positions(self) -> tuple[str, ...]:
        out = []
        for s in self.sources:
            if s.position not in out:
                out.append(s.position)
        return tuple(out)


@dataclass(frozen=True)
class SensorModel:
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0
    drift_per_second: float = 0.0
    dropout_prob: float = 0.0
    transfer: str = "linear"  # linear | thermocouple

    def __post_init__(self):
        if self.noise_sigma < 0 or not (0.0 <= self.dropout_prob < 1.0):
            raise SensorError("noise_sigma >= 0 and dropout_prob in [0,1) required")
        if self.transfer not in ("linear", "thermocouple"):
            raise SensorError(f"unknown transfer {self.transfer!r}")


@dataclass(frozen=True)
class SignalSpec:
    base_freq: float
    amplitude: float = 1.0
    phase: float = 0.0


@dataclass(frozen=True)
class PlantedDgp:
    """Ground truth: which sources are informative for which activity.

    crosstalk_amp > 0 makes non-informative channels carry sinusoid bursts at
    frequencies drawn from the pooled activity signatures (per window block),
    i.e. actively misleading interference rather than plain noise."""
    activities: tuple[str, ...]
    informative: Mapping[str, Mapping[str, SignalSpec]]
    distractor_sigma: float = 1.0
    crosstalk_amp: float = 0.0
    distractor_offset_sigma: float = 0.0  # per-recording DC offset (calibration drift)
    phase_jitter: float = 0.5
    freq_jitter: float = 0.0
    amp_jitter: float = 0.0
    autocorr: float = 0.0  # AR(1) coefficient of per-window jitters

    def __post_init__(self):
        object.__setattr__(self, "activities", tuple(self.activities))
        object.__setattr__(self, "informative",
                           {a: dict(m) for a, m in dict(self.informative).items()})
        for a in self.activities:
            if not self.informative.get(a):
                raise SensorError(f"activity {a!r} has no informative sources")

    def informative_ids(self, activity: str) -> frozenset[str]:
        return frozenset(self.informative[activity])

    def pooled_freqs(self) -> tuple[float, ...]:
        return tuple(sorted({spec.base_freq for specs in self.informative.values()
                             for spec in specs.values()}))


@dataclass
class Recording:
    id: str
    signals: np.ndarray  # (n_channels, n_samples), NaN marks dropout gaps
    labels: np.ndarray   # (n_samples,) str, NULL_LABEL for the null class


@dataclass
class Frame:
    frame_id: int
    activity: str | None  # None for the null class
    samples: np.ndarray   # (n_channels, window_len), gaps zero-filled
    time_index: int       # start sample within its recording
    recording: str
    gap_fraction: float = 0.0

    @property
    def is_null(self) -> bool:
        return self.activity is None


@dataclass
class Dataset:
    deployment: Deployment
    activities: tuple[str, ...]
    recordings: list[Recording]
    frames: list[Frame] = field(default_factory=list)


@dataclass
class FoldAssignment:
    k: int
    meta_len: int
    seed: int
    assignment: dict[int, int]  # frame_id -> fold

    def fold_of(self, frame: Frame) -> int:
        return self.assignment[frame.frame_id]

    def split(self, frames: Sequence[Frame], fold: int) -> tuple[list[Frame], list[Frame]]:
        train = [f for f in frames if self.assignment[f.frame_id] != fold]
        val = [f for f in frames if self.assignment[f.frame_id] == fold]
        return train, val

    def to_json(self) -> dict:
        return {"k": self.k, "meta_len": self.meta_len, "seed": self.seed,
                "assignment": {str(i): f for i, f in sorted(self.assignment.items())}}


def folds_from_json(doc: Mapping) -> FoldAssignment:
    return FoldAssignment(k=int(doc["k"]), meta_len=int(doc["meta_len"]),
                          seed=int(doc["seed"]),
                          assignment={int(i): int(f) for i, f in doc["assignment"].items()})


# ---------------------------------------------------------------------------
# generation

def _ar1(rng: np.random.Generator, n: int, sigma: float, rho: float) -> np.ndarray:
    if sigma == 0.0 or n == 0:
        return np.zeros(n)
    innov = rng.normal(0.0, sigma, n)
    if rho == 0.0:
        return innov
    out = np.empty(n)
    out[0] = innov[0]
    for i in range(1, n):
        out[i] = rho * out[i - 1] + math.sqrt(1.0 - rho * rho) * innov[i]
    return out


def _apply_sensor_model(x: np.ndarray, model: SensorModel, fs: float,
                        rng: np.random.Generator) -> np.ndarray:
    if model.transfer == "thermocouple":
        y = thermocouple_transfer(x)
    else:
        y = model.gain * x + model.offset
    t = np.arange(x.shape[-1]) / fs
    y = y + model.drift_per_second * t
    if model.noise_sigma > 0:
        y = y + rng.normal(0.0, model.noise_sigma, x.shape)
    if model.dropout_prob > 0:
        y = np.where(rng.uniform(size=x.shape) < model.dropout_prob, np.nan, y)
    return y


def generate(deployment: Deployment, planted: PlantedDgp, frames_per_activity: int,
             window_len: int, sensor_models: Mapping[str, SensorModel] | SensorModel | None = None,
             seed: int = 0, stride: int | float | None = None,
             gap_max_frac: float = 0.1, recordings_per_activity: int = 1) -> Dataset:
    """Synthesize recordings per activity and segment them into frames.

    Informative channels carry the planted sinusoid plus the sensor model's
    noise; every other channel is Gaussian noise at distractor_sigma, plus
    optional cross-talk bursts and a per-recording calibration offset
    (distractor_offset_sigma) that varies between sessions. Deterministic for
    a fixed seed. stride < window_len emits overlapping frames (see
    :func:`segment` for the stride conventions).
    """
    if window_len < 2:
        raise SensorError("window_len must be >= 2")
    fs = deployment.sampling_rate
    stride_s = _resolve_stride(stride, window_len)
    if isinstance(sensor_models, SensorModel) or sensor_models is None:
        default = sensor_models or SensorModel()
        sensor_models = {s.id: default for s in deployment.sources}

    recordings = []
    for ai, activity in enumerate(planted.activities):
        for rep in range(recordings_per_activity):
            T = (frames_per_activity - 1) * stride_s + window_len
            n_blocks = math.ceil(T / window_len)
            rng = derive_rng(seed, ai, rep)
            signals = np.empty((deployment.n_channels, T))
            informative = planted.informative[activity]
            t_axis = np.arange(T) / fs
            block_of = np.minimum(np.arange(T) // window_len, n_blocks - 1)
            for source in deployment.sources:
                sl = deployment.channel_slice(source.id)
                if source.id in informative:
                    spec = informative[source.id]
                    phase_j = _ar1(rng, n_blocks, planted.phase_jitter, planted.autocorr)
                    freq_j = _ar1(rng, n_blocks, planted.freq_jitter, planted.autocorr)
                    amp_j = _ar1(rng, n_blocks, planted.amp_jitter, planted.autocorr)
                    freq = spec.base_freq * (1.0 + freq_j[block_of])
                    amp = np.maximum(spec.amplitude * (1.0 + amp_j[block_of]), 0.0)
                    for ci in range(source.channels):
                        ph = spec.phase + phase_j[block_of] + 0.5 * ci
                        signals[sl.start + ci] = amp * np.sin(2 * math.pi * freq * t_axis + ph)
                else:
                    noise = rng.normal(0.0, planted.distractor_sigma,
                                       (source.channels, T))
                    if planted.crosstalk_amp > 0.0:
                        freqs = np.array(planted.pooled_freqs())
                        for ci in range(source.channels):
                            f_b = freqs[rng.integers(0, len(freqs), n_blocks)]
                            ph_b = rng.uniform(0.0, 2 * math.pi, n_blocks)
                            noise[ci] += planted.crosstalk_amp * np.sin(
                                2 * math.pi * f_b[block_of] * t_axis + ph_b[block_of])
                    if planted.distractor_offset_sigma > 0.0:
                        noise += rng.normal(0.0, planted.distractor_offset_sigma,
                                            (source.channels, 1))
                    signals[sl] = noise
                model_rng = derive_rng(seed, ai, rep, sl.start)
                signals[sl] = _apply_sensor_model(signals[sl], sensor_models[source.id],
                                                  fs, model_rng)
            labels = np.full(T, activity, dtype=object)
            rec_id = f"rec_{activity}" if recordings_per_activity == 1 else f"rec_{activity}_{rep}"
            recordings.append(Recording(id=rec_id, signals=signals, labels=labels))

    ds = Dataset(deployment=deployment, activities=planted.activities,
                 recordings=recordings)
    ds.frames = segment(ds, window_len, stride_s, gap_max_frac=gap_max_frac)
    return ds


def _resolve_stride(stride, window_len: int) -> int:
    """float in (0,1] is a fraction of the window; int >= 1 is samples."""
    if stride is None:
        return window_len
    if isinstance(stride, float) and 0.0 < stride <= 1.0:
        return max(1, round(stride * window_len))
    stride = int(stride)
    if not (0 < stride <= window_len):
        raise SensorError("stride must satisfy 0 < stride <= window_len")
    return stride


def moving_average(signals: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average per channel (the one preprocessing knob);
    window=1 is the identity. Gap markers (NaN) are zero-filled first."""
    if window < 1:
        raise SensorError("smoothing window must be >= 1")
    if window == 1:
        return signals
    kernel = np.full(window, 1.0 / window)
    filled = np.nan_to_num(signals, nan=0.0)
    return np.stack([np.convolve(ch, kernel, mode="same") for ch in filled])


def segment(dataset: Dataset, window_len: int, stride: int | float | None = None,
            gap_max_frac: float = 0.1, smooth_window: int = 1) -> list[Frame]:
    """Cut every recording into windows starting at 0, stride, 2*stride, ...

    The frame label is the majority label of its samples (ties resolved to
    the alphabetically first label); majority-null frames keep activity=None.
    Trailing partial windows are dropped. Frames whose dropout-gap fraction
    exceeds gap_max_frac are excluded; surviving gaps are zero-filled.
    smooth_window > 1 applies the moving-average preprocessing first (gap
    fractions are still measured on the raw stream).
    """
    stride_s = _resolve_stride(stride, window_len)
    frames: list[Frame] = []
    frame_id = 0
    for rec in dataset.recordings:
        T = rec.signals.shape[1]
        if window_len > T:
            raise SensorError(f"window {window_len} longer than recording {rec.id} ({T})")
        smoothed = moving_average(rec.signals, smooth_window)
        for start in range(0, T - window_len + 1, stride_s):
            raw = rec.signals[:, start:start + window_len]
            labels, counts = np.unique(rec.labels[start:start + window_len],
                                       return_counts=True)
            majority = str(labels[int(np.argmax(counts))])
            gap = float(np.isnan(raw).mean())
            frame_id_here = frame_id
            frame_id += 1
            if gap > gap_max_frac:
                continue
            samples = np.nan_to_num(smoothed[:, start:start + window_len], nan=0.0)
            frames.append(Frame(
                frame_id=frame_id_here,
                activity=None if majority == NULL_LABEL else majority,
                samples=samples,
                time_index=start,
                recording=rec.id,
                gap_fraction=gap,
            ))
    return frames


def segment_count(n_samples: int, window_len: int, stride: int) -> int:
    return (n_samples - window_len) // stride + 1


def meta_segment_partition(frames: Sequence[Frame], k: int, meta_len: int,
                           seed: int) -> FoldAssignment:
    """Group adjacent frames (per recording) into runs of meta_len, shuffle
    the runs, and deal them to the least-loaded fold (round-robin whenever
    runs are equal-sized, which keeps fold sizes within +-meta_len of
    balance even with short tail runs). meta_len=1 reproduces plain random
    frame-level partitioning. Runs never span recordings."""
    if k < 2:
        raise SensorError("k must be >= 2")
    if meta_len < 1:
        raise SensorError("meta_len must be >= 1")
    runs: list[list[int]] = []
    by_rec: dict[str, list[Frame]] = {}
    for f in frames:
        by_rec.setdefault(f.recording, []).append(f)
    for rec_frames in by_rec.values():
        ordered = sorted(rec_frames, key=lambda f: f.time_index)
        for i in range(0, len(ordered), meta_len):
            runs.append([f.frame_id for f in ordered[i:i + meta_len]])
    if len(runs) < k:
        raise SensorError(f"fewer runs than folds ({len(runs)} < {k})")
    rng = derive_rng(seed)
    order = rng.permutation(len(runs))
    loads = [0] * k
    assignment: dict[int, int] = {}
    for run_idx in order:
        fold = loads.index(min(loads))
        for fid in runs[run_idx]:
            assignment[fid] = fold
        loads[fold] += len(runs[run_idx])
    return FoldAssignment(k=k, meta_len=meta_len, seed=seed, assignment=assignment)


# ---------------------------------------------------------------------------
# on-disk layout: meta.json + one CSV per position

def write_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dep = dataset.deployment
    meta = {
        "sampling_rate": dep.sampling_rate,
        "activities": list(dataset.activities),
        "sources": [{"id": s.id, "position": s.position, "modality": s.modality,
                     "channels": s.channels} for s in dep.sources],
        "recordings": [{"id": r.id, "n_samples": int(r.signals.shape[1])}
                       for r in dataset.recordings],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for position in dep.positions():
        cols: list[tuple[str, int]] = []  # (source_id, channel index)
        for s in dep.sources:
            if s.position == position:
                cols.extend((s.id, ci) for ci in range(s.channels))
        with open(out / f"{position}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"{sid}_c{ci}" for sid, ci in cols] + ["label"])
            for rec in dataset.recordings:
                for t in range(rec.signals.shape[1]):
                    row = []
                    for sid, ci in cols:
                        v = rec.signals[dep.channel_slice(sid).start + ci, t]
                        row.append("" if math.isnan(v) else repr(float(v)))
                    row.append(str(rec.labels[t]))
                    writer.writerow(row)


def ingest_csv(path: str | Path) -> Dataset:
    """Load a dataset directory (meta.json sidecar + per-position CSVs).

    Streams are aligned by row index across position files; ragged or short
    rows are rejected with their line number.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise IngestError(f"missing sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    sources = tuple(DataSource(id=s["id"], position=s["position"],
                               modality=s["modality"], channels=int(s.get("channels", 1)))
                    for s in meta["sources"])
    dep = Deployment(sources=sources, sampling_rate=float(meta["sampling_rate"]))
    activities = tuple(meta["activities"])

    per_position: dict[str, tuple[list[str], np.ndarray, list[str]]] = {}
    n_rows = None
    for position in dep.positions():
        fpath = root / f"{position}.csv"
        if not fpath.exists():
            raise IngestError(f"missing position file {fpath}")
        with open(fpath, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            width = len(header)
            rows = []
            labels = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != width:
                    raise IngestError(f"{fpath}:{lineno}: ragged row "
                                      f"({len(row)} fields, expected {width})")
                labels.append(row[-1])
                rows.append([float(v) if v != "" else math.nan for v in row[:-1]])
            data = np.array(rows, dtype=float).reshape(len(rows), width - 1)
        per_position[position] = (header[:-1], data, labels)
        if n_rows is None:
            n_rows = len(rows)
        elif len(rows) != n_rows:
            raise IngestError(f"{fpath}: {len(rows)} rows, expected {n_rows} "
                              "(positions must align by row index)")

    labels0 = per_position[dep.positions()[0]][2]
    for lineno, lab in enumerate(labels0, start=2):
        if lab not in activities and lab != NULL_LABEL and lab != "":
            raise IngestError(f"unknown label {lab!r} at line {lineno}")
    labels_arr = np.array([lab if lab else NULL_LABEL for lab in labels0], dtype=object)

    signals = np.full((dep.n_channels, n_rows), np.nan)
    for position in dep.positions():
        header, data, _ = per_position[position]
        for col, name in enumerate(header):
            sid, _, ci = name.rpartition("_c")
            signals[dep.channel_slice(sid).start + int(ci)] = data[:, col]

    bounds = []
    offset = 0
    for rec_meta in meta.get("recordings", [{"id": "rec_0", "n_samples": n_rows}]):
        n = int(rec_meta["n_samples"])
        bounds.append((rec_meta["id"], offset, offset + n))
        offset += n
    if offset != n_rows:
        raise IngestError(f"recording lengths sum to {offset}, files have {n_rows} rows")
    recordings = [Recording(id=rid, signals=signals[:, a:b], labels=labels_arr[a:b])
                  for rid, a, b in bounds]
    return Dataset(deployment=dep, activities=activities, recordings=recordings)
