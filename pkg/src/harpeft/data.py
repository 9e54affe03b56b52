"""Multi-domain sensor data: synthetic generation, ingestion, preprocessing
and leave-one-dataset-out fold construction.

The pipeline mirrors common wearable-sensor practice: every recording is
resampled to 50 Hz, z-normalized per channel within its own domain, and cut
into 128-sample windows with 50% overlap. Domains are combined by taking the
union of their activity labels, and under the leave-one-dataset-out protocol
each domain serves as the held-out target exactly once.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .container import PayloadWriter, read_container, read_entry, write_container
from .numerics import Rng

TARGET_RATE_HZ = 50.0
WINDOW_LEN = 128
WINDOW_HOP = 64
DEFAULT_CHANNELS = 6

ACTIVITY_NAMES = ("walking", "running", "sitting", "standing",
                  "upstairs", "downstairs", "cycling", "lying")


class DataError(ValueError):
    """Invalid recordings, specs or files."""


class ProtocolError(ValueError):
    """Fold construction over an unusable domain collection."""


@dataclass
class SensorRecording:
    """A contiguous n x C sample stream with one activity label."""

    samples: np.ndarray
    sample_rate: float
    label: str
    domain_id: str
    subject_id: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise DataError("samples must be a non-empty n x C array")
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[1]


@dataclass
class Window:
    """One fixed 128 x C segment; the label is the activity name."""

    values: np.ndarray
    label: str
    domain_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != WINDOW_LEN:
            raise DataError(f"windows are exactly {WINDOW_LEN} samples")


@dataclass
class DatasetBundle:
    """Windows plus the ordered activity-name vocabulary defining class ids."""

    windows: list[Window]
    label_vocabulary: dict[str, int]

    def __post_init__(self):
        missing = {w.label for w in self.windows} - set(self.label_vocabulary)
        if missing:
            raise DataError(f"window labels missing from vocabulary: {sorted(missing)}")

    @property
    def n_classes(self) -> int:
        return len(self.label_vocabulary)

    def labels(self) -> np.ndarray:
        return np.array([self.label_vocabulary[w.label] for w in self.windows],
                        dtype=np.intp)

    def domains(self) -> tuple[str, ...]:
        return tuple(sorted({w.domain_id for w in self.windows}))

    def subset(self, indices) -> "DatasetBundle":
        return DatasetBundle(windows=[self.windows[i] for i in indices],
                             label_vocabulary=dict(self.label_vocabulary))

    def window_values(self) -> list[np.ndarray]:
        return [w.values for w in self.windows]


def make_vocabulary(names) -> dict[str, int]:
    """Lexicographic class-id assignment."""
    return {name: i for i, name in enumerate(sorted(set(names)))}


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resample_to_50hz(rec: SensorRecording) -> SensorRecording:
    """Bring a recording to 50 Hz.

    Exactly 50 Hz input is returned bit-identical. An integer-ratio source is
    decimated by averaging each run of ``ratio`` consecutive samples (a boxcar
    low-pass prefilter); anything else is linearly interpolated onto the 50 Hz
    grid. Upsampling is refused.
    """
    if rec.sample_rate < TARGET_RATE_HZ:
        raise DataError(
            f"cannot upsample {rec.sample_rate} Hz to {TARGET_RATE_HZ} Hz")
    if rec.sample_rate == TARGET_RATE_HZ:
        return rec
    ratio = rec.sample_rate / TARGET_RATE_HZ
    if float(ratio).is_integer():
        k = int(ratio)
        n_out = rec.n_samples // k
        trimmed = rec.samples[: n_out * k]
        out = trimmed.reshape(n_out, k, rec.channels).mean(axis=1)
    else:
        duration = (rec.n_samples - 1) / rec.sample_rate
        t_out = np.arange(0, math.floor(duration * TARGET_RATE_HZ) + 1) / TARGET_RATE_HZ
        t_in = np.arange(rec.n_samples) / rec.sample_rate
        out = np.column_stack([np.interp(t_out, t_in, rec.samples[:, c])
                               for c in range(rec.channels)])
    return replace(rec, samples=out, sample_rate=TARGET_RATE_HZ)


def znormalize(recordings: list[SensorRecording],
               eps: float = 1e-12) -> list[SensorRecording]:
    """Per-channel z-normalization with statistics over one whole domain.

    Statistics are computed across all recordings passed in (normally one
    domain) before windowing. Constant channels map to zero via the eps floor.
    """
    if not recordings:
        return []
    stacked = np.concatenate([r.samples for r in recordings], axis=0)
    if stacked.shape[0] < 2:
        raise DataError("need at least 2 samples per channel to normalize")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < eps, 1.0, std)  # constant channels become all-zero
    return [replace(r, samples=(r.samples - mean) / std) for r in recordings]


def segment_windows(rec: SensorRecording) -> list[Window]:
    """128-sample windows at offsets 0, 64, 128, ...; only fully inside ones."""
    if rec.sample_rate != TARGET_RATE_HZ:
        raise DataError("segment_windows expects a 50 Hz recording")
    out = []
    for start in range(0, rec.n_samples - WINDOW_LEN + 1, WINDOW_HOP):
        out.append(Window(values=rec.samples[start:start + WINDOW_LEN].copy(),
                          label=rec.label, domain_id=rec.domain_id))
    return out


def build_domain_bundle(recordings: list[SensorRecording]) -> DatasetBundle:
    """Resample, normalize and window one domain's recordings."""
    resampled = [resample_to_50hz(r) for r in recordings]
    normalized = znormalize(resampled)
    windows = [w for r in normalized for w in segment_windows(r)]
    return DatasetBundle(windows=windows,
                         label_vocabulary=make_vocabulary(r.label for r in recordings))


def build_label_union(domains: list[DatasetBundle]) -> DatasetBundle:
    """Pool domains under the lexicographic union of their activity names."""
    if not domains:
        raise DataError("build_label_union: no domains")
    vocab = make_vocabulary(name for d in domains for name in d.label_vocabulary)
    windows = [w for d in domains for w in d.windows]
    return DatasetBundle(windows=windows, label_vocabulary=vocab)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSignal:
    """Signal family of one activity class.

    The per-channel offsets give each class a distinct mean level so that
    classes stay separable after windowing; the oscillatory part carries the
    class frequency signature across harmonics.
    """

    name: str
    base_freq_hz: float
    amplitude: float = 1.0
    harmonics: tuple[float, ...] = (1.0, 0.3)
    channel_offsets: tuple[float, ...] = ()


@dataclass(frozen=True)
class DomainShift:
    """Covariate shift applied by one domain: gains, detuning and noise."""

    name: str
    amplitude_scale: float = 1.0
    freq_offset_hz: float = 0.0
    noise_sigma: float = 0.05
    channel_gains: tuple[float, ...] = ()


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[ClassSignal, ...]
    domains: tuple[DomainShift, ...]
    samples_per_class: int = 1280
    sample_rate_hz: float = TARGET_RATE_HZ
    channels: int = DEFAULT_CHANNELS
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise DataError("spec needs at least one class")
        if not self.domains:
            raise DataError("spec needs at least one domain")
        freqs = [c.base_freq_hz for c in self.classes]
        names = [c.name for c in self.classes]
        if len(set(freqs)) != len(freqs) or len(set(names)) != len(names):
            raise DataError("class signal families must be pairwise distinct")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be positive")


def default_synthetic_spec(n_domains: int = 5, n_classes: int = 6,
                           samples_per_class: int = 1280, seed: int = 0,
                           noise_sigma: float = 0.05,
                           sample_rate_hz: float = TARGET_RATE_HZ) -> SyntheticSpec:
    """Evenly spread class frequencies and mild per-domain shifts."""
    if n_classes > len(ACTIVITY_NAMES):
        raise DataError(f"at most {len(ACTIVITY_NAMES)} named classes")
    channels = DEFAULT_CHANNELS
    classes = []
    for k in range(n_classes):
        offsets = tuple(0.9 * math.cos(2.0 * math.pi * (k + 1) * (c + 1) / (channels + 1))
                        for c in range(channels))
        classes.append(ClassSignal(
            name=ACTIVITY_NAMES[k],
            base_freq_hz=1.0 + 0.9 * k,
            amplitude=1.0,
            harmonics=(1.0, 0.2 + 0.05 * k),
            channel_offsets=offsets,
        ))
    domains = []
    for d in range(n_domains):
        gains = tuple(1.0 + 0.08 * math.sin(2.0 * math.pi * (d + 1) * (c + 2) / 9.0)
                      for c in range(channels))
        domains.append(DomainShift(
            name=f"domain_{chr(ord('a') + d)}",
            amplitude_scale=1.0 + 0.06 * (d - n_domains / 2.0),
            freq_offset_hz=0.04 * d,
            noise_sigma=noise_sigma * (1.0 + 0.2 * d),
            channel_gains=gains,
        ))
    return SyntheticSpec(classes=tuple(classes), domains=tuple(domains),
                         samples_per_class=samples_per_class,
                         sample_rate_hz=sample_rate_hz, seed=seed)


def _synthesize_recording(signal: ClassSignal, shift: DomainShift, spec: SyntheticSpec,
                          phase_rng: Rng, noise_rng: Rng) -> SensorRecording:
    # Phases are keyed by class only, so domains differing by a null shift are
    # byte-identical and labels keep the same meaning everywhere.
    n = spec.samples_per_class
    c_count = spec.channels
    t = np.arange(n) / spec.sample_rate_hz
    freq = signal.base_freq_hz + shift.freq_offset_hz
    gains = np.array(shift.channel_gains or (1.0,) * c_count)
    offsets = np.array(signal.channel_offsets or (0.0,) * c_count)
    phases = phase_rng.uniform(len(signal.harmonics), c_count) * 2.0 * math.pi
    samples = np.zeros((n, c_count))
    for j, weight in enumerate(signal.harmonics):
        angles = 2.0 * math.pi * freq * (j + 1) * t
        samples += weight * np.sin(angles[:, None] + phases[j][None, :])
    samples *= signal.amplitude * shift.amplitude_scale * gains[None, :]
    samples += offsets[None, :]
    if shift.noise_sigma > 0:
        samples += shift.noise_sigma * noise_rng.normal(n, c_count)
    return SensorRecording(samples=samples, sample_rate=spec.sample_rate_hz,
                           label=signal.name, domain_id=shift.name)


def generate_recordings(spec: SyntheticSpec) -> dict[str, list[SensorRecording]]:
    """Raw (pre-preprocessing) recordings per domain, for file export."""
    root = Rng(spec.seed)
    out: dict[str, list[SensorRecording]] = {}
    for shift in spec.domains:
        out[shift.name] = [
            _synthesize_recording(sig, shift, spec,
                                  root.child(f"phase/{sig.name}"),
                                  root.child(f"noise/{shift.name}/{sig.name}"))
            for sig in spec.classes]
    return out


def generate_synthetic(spec: SyntheticSpec) -> list[DatasetBundle]:
    """One preprocessed bundle per domain, deterministic under the spec seed."""
    return [build_domain_bundle(recs)
            for recs in generate_recordings(spec).values()]


# ---------------------------------------------------------------------------
# Protocol: folds and splits
# ---------------------------------------------------------------------------

def lodo_folds(bundles: list[DatasetBundle]) -> list[tuple[DatasetBundle, DatasetBundle]]:
    """Leave-one-dataset-out folds over single-domain bundles.

    Fold i pools every domain except i for pretraining and holds domain i out
    as the adaptation target; all folds share the union label vocabulary.
    """
    if len(bundles) < 2:
        raise ProtocolError("leave-one-dataset-out needs at least 2 domains")
    for b in bundles:
        if len(b.domains()) != 1:
            raise ProtocolError("each bundle passed to lodo_folds must hold one domain")
    union = build_label_union(bundles)
    vocab = union.label_vocabulary
    folds = []
    for i in range(len(bundles)):
        rest = [w for j, b in enumerate(bundles) if j != i for w in b.windows]
        folds.append((
            DatasetBundle(windows=rest, label_vocabulary=dict(vocab)),
            DatasetBundle(windows=list(bundles[i].windows), label_vocabulary=dict(vocab)),
        ))
    return folds


def split_train_eval(bundle: DatasetBundle, fraction: float = 0.7,
                     seed: int = 0) -> tuple[DatasetBundle, DatasetBundle]:
    """Deterministic stratified split; disjoint and exhaustive.

    Classes with a single window go to the training side with a warning.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    rng = Rng(seed).child("split")
    labels = bundle.labels()
    train_idx: list[int] = []
    eval_idx: list[int] = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) == 1:
            warnings.warn(f"class id {cls} has one window; kept in train")
            train_idx.extend(members.tolist())
            continue
        order = members[rng.permutation(len(members))]
        n_train = int(round(fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(order[:n_train].tolist())
        eval_idx.extend(order[n_train:].tolist())
    return bundle.subset(sorted(train_idx)), bundle.subset(sorted(eval_idx))


# ---------------------------------------------------------------------------
# File formats: tabular text in, binary window cache out
# ---------------------------------------------------------------------------

def save_domain_csv(recordings: list[SensorRecording], path) -> None:
    """One row per sample: C channel columns, activity, optional subject."""
    channels = recordings[0].channels
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"ch{c}" for c in range(channels)] + ["activity", "subject"])
        for rec in recordings:
            subject = rec.subject_id or ""
            for row in rec.samples:
                writer.writerow([repr(float(v)) for v in row] + [rec.label, subject])


def load_domain_csv(path, domain_id: str, sample_rate: float) -> list[SensorRecording]:
    """Parse the tabular format; maximal runs of one (activity, subject) pair
    become recordings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "activity" not in header:
            raise DataError(f"{path}: header row with an 'activity' column is mandatory")
        act_col = header.index("activity")
        subj_col = header.index("subject") if "subject" in header else None
        n_channels = act_col
        recordings: list[SensorRecording] = []
        current: list[list[float]] = []
        current_key: tuple[str, str] | None = None

        def flush():
            if current:
                recordings.append(SensorRecording(
                    samples=np.array(current), sample_rate=sample_rate,
                    label=current_key[0], domain_id=domain_id,
                    subject_id=current_key[1] or None))

        for line in reader:
            if not line:
                continue
            key = (line[act_col], line[subj_col] if subj_col is not None else "")
            if key != current_key:
                flush()
                current, current_key = [], key
            current.append([float(v) for v in line[:n_channels]])
        flush()
    if not recordings:
        raise DataError(f"{path}: no samples")
    return recordings


def save_data_manifest(path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps({"domains": entries}, indent=2, sort_keys=True))


def load_data_manifest(path) -> list[dict]:
    spec = json.loads(Path(path).read_text())
    if "domains" not in spec:
        raise DataError(f"{path}: manifest must list domains")
    return spec["domains"]


def load_domains_from_manifest(manifest_path) -> dict[str, DatasetBundle]:
    """Read every domain file named in a manifest and preprocess it."""
    base = Path(manifest_path).parent
    out = {}
    for entry in load_data_manifest(manifest_path):
        recs = load_domain_csv(base / entry["path"], entry["name"],
                               float(entry["sample_rate_hz"]))
        out[entry["name"]] = build_domain_bundle(recs)
    return out


def save_window_cache(bundles: dict[str, DatasetBundle], path) -> None:
    """Binary cache of preprocessed windows (manifest + float64 payload)."""
    writer = PayloadWriter()
    meta = {"domains": [], "vocabulary": {}}
    for name in sorted(bundles):
        bundle = bundles[name]
        values = np.stack([w.values for w in bundle.windows])
        writer.add(f"{name}/windows", values, "f64")
        meta["domains"].append({
            "name": name,
            "labels": [w.label for w in bundle.windows],
            "vocabulary": bundle.label_vocabulary,
        })
    write_container(path, "window_cache", meta, writer)


def load_window_cache(path) -> dict[str, DatasetBundle]:
    manifest, payload = read_container(path, expect_kind="window_cache")
    entries = {e["name"]: e for e in manifest["entries"]}
    out = {}
    for dom in manifest["meta"]["domains"]:
        values = read_entry(entries[f"{dom['name']}/windows"], payload)
        windows = [Window(values=values[i], label=lab, domain_id=dom["name"])
                   for i, lab in enumerate(dom["labels"])]
        out[dom["name"]] = DatasetBundle(
            windows=windows,
            label_vocabulary={k: int(v) for k, v in dom["vocabulary"].items()})
    return out
