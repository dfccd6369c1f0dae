"""Cohort representation: ingestion, synthesis, windowing, labels, folds.

Recordings live as row-major channels x samples float arrays with one
annotation track per expert. Window extraction is non-overlapping with the
trailing remainder dropped, and a window is labeled positive only when
every annotator marks at least `min_overlap_s` seconds of seizure inside it.

On-disk cohort format: a JSON manifest plus one raw little-endian float32
signal file per recording (byte length must equal 4 * channels * samples).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import DataFormatError

DEFAULT_SAMPLING_RATE_HZ = 200.0
DEFAULT_WINDOW_S = 30.0
DEFAULT_MIN_OVERLAP_S = 1.0

# Reduced double-banana bipolar montage used for full-coverage recordings.
MONTAGE_18_CHANNELS = (
    "Fp2-F4", "F4-C4", "C4-P4", "P4-O2",
    "Fp1-F3", "F3-C3", "C3-P3", "P3-O1",
    "Fp2-T4", "T4-T6", "T6-O2",
    "Fp1-T3", "T3-T5", "T5-O1",
    "T4-C4", "C4-Cz", "Cz-C3", "C3-T3",
)
# Minimal montage for small heads / limited electrode budgets.
MONTAGE_3_CHANNELS = ("C3-P3", "C4-P4", "P3-P4")

_BACKGROUND_RMS_UV = 15.0


@dataclass(frozen=True)
class Montage:
    """An ordered set of bipolar channel labels."""

    name: str
    channels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) < 1:
            raise ValueError("montage needs at least one channel")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("montage channel labels must be unique")

    @property
    def n_channels(self) -> int:
        return len(self.channels)


def builtin_montage(which) -> Montage:
    """Return the bundled 18- or 3-channel bipolar montage."""
    key = str(which)
    if key in ("18", "bipolar18"):
        return Montage("bipolar18", MONTAGE_18_CHANNELS)
    if key in ("3", "bipolar3"):
        return Montage("bipolar3", MONTAGE_3_CHANNELS)
    raise ValueError(f"unknown montage {which!r} (expected 18 or 3)")


@dataclass(frozen=True)
class AnnotationTrack:
    """One expert's seizure intervals, half-open [start_s, end_s)."""

    annotator_id: str
    events: tuple[tuple[float, float], ...]

    def __post_init__(self):
        evs = tuple((float(s), float(e)) for s, e in self.events)
        object.__setattr__(self, "events", evs)
        prev_end = None
        for s, e in evs:
            if not s < e:
                raise ValueError(f"annotation interval must have start < end: ({s}, {e})")
            if s < 0:
                raise ValueError(f"annotation interval starts before 0: ({s}, {e})")
            if prev_end is not None and s < prev_end:
                raise ValueError("annotation intervals overlap within one track")
            prev_end = e

    def overlap_with(self, start_s: float, end_s: float) -> float:
        total = 0.0
        for s, e in self.events:
            total += max(0.0, min(e, end_s) - max(s, start_s))
        return total


@dataclass
class Recording:
    """A continuous multichannel recording with expert annotations."""

    neonate_id: str
    signal: np.ndarray
    montage: Montage
    annotations: list[AnnotationTrack] = field(default_factory=list)
    sampling_rate_hz: float = DEFAULT_SAMPLING_RATE_HZ
    recording_id: str = ""

    def __post_init__(self):
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling rate must be positive")
        sig = np.asarray(self.signal)
        if sig.ndim != 2 or sig.shape[1] < 1:
            raise ValueError(f"signal must be a 2-d channels x samples array, got {sig.shape}")
        if sig.shape[0] != self.montage.n_channels:
            raise DataFormatError(
                f"signal has {sig.shape[0]} rows but montage "
                f"{self.montage.name!r} declares {self.montage.n_channels} channels")
        if not np.isfinite(sig).all():
            raise DataFormatError("non-finite sample in recording signal")
        self.signal = sig
        dur = self.duration_s
        for track in self.annotations:
            for s, e in track.events:
                if e > dur + 1e-9:
                    raise ValueError(
                        f"annotation ({s}, {e}) exceeds recording duration {dur:.3f}s")
        if not self.recording_id:
            self.recording_id = self.neonate_id

    @property
    def n_channels(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz


@dataclass
class EegWindow:
    """One fixed-length clip: channels x samples plus its consensus label."""

    x: np.ndarray
    y: int
    neonate_id: str
    offset_s: float

    def __post_init__(self):
        if self.x.ndim != 2:
            raise ValueError("window signal must be 2-d (channels x samples)")
        if self.y not in (0, 1):
            raise ValueError("window label must be 0 or 1")


@dataclass(frozen=True)
class FoldSplit:
    """Patient-wise cross-validation split: per fold (train ids, test ids)."""

    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def __post_init__(self):
        norm = tuple((tuple(tr), tuple(te)) for tr, te in self.folds)
        object.__setattr__(self, "folds", norm)
        all_ids: set[str] = set()
        tested: list[str] = []
        for train, test in norm:
            if set(train) & set(test):
                raise ValueError("a neonate appears in both train and test of one fold")
            tested.extend(test)
            all_ids.update(train)
            all_ids.update(test)
        if len(tested) != len(set(tested)):
            raise ValueError("a neonate appears in more than one test fold")
        if set(tested) != all_ids:
            raise ValueError("every neonate must appear in exactly one test fold")

    @property
    def k(self) -> int:
        return len(self.folds)


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic multi-neonate cohort generator.

    Per-neonate ranges introduce subject-level shift: background gain,
    dominant background frequency, seizure rhythm frequency, and how many
    channels each seizure affects. All randomness derives from `seed`.
    """

    n_neonates: int
    seed: int
    montage: Montage
    minutes_per_neonate: float = 40.0
    seizure_rate_per_hour: float = 6.0
    background_gain_range: tuple[float, float] = (0.7, 1.4)
    background_freq_range_hz: tuple[float, float] = (3.0, 9.0)
    seizure_freq_range_hz: tuple[float, float] = (2.0, 4.0)
    affected_channel_range: tuple[int, int] | None = None
    seizure_amplitude_range: tuple[float, float] = (2.0, 3.5)
    event_duration_range_s: tuple[float, float] = (40.0, 90.0)
    annotator_jitter_s: float = 1.5
    n_annotators: int = 3
    sampling_rate_hz: float = DEFAULT_SAMPLING_RATE_HZ

    def __post_init__(self):
        if self.n_neonates < 1:
            raise ValueError("need at least one neonate")
        if self.minutes_per_neonate <= 0:
            raise ValueError("minutes_per_neonate must be positive")
        if self.seizure_rate_per_hour < 0:
            raise ValueError("seizure rate must be >= 0")
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling rate must be positive")
        if self.n_annotators < 1:
            raise ValueError("need at least one annotator")
        if self.annotator_jitter_s < 0:
            raise ValueError("annotator jitter must be >= 0")
        for rng_name in ("background_gain_range", "background_freq_range_hz",
                         "seizure_freq_range_hz", "seizure_amplitude_range",
                         "event_duration_range_s"):
            lo, hi = getattr(self, rng_name)
            if not (0 < lo <= hi):
                raise ValueError(f"{rng_name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.affected_channel_range is not None:
            lo, hi = self.affected_channel_range
            if not (1 <= lo <= hi):
                raise ValueError("affected_channel_range must satisfy 1 <= lo <= hi")

    def resolved_affected_range(self) -> tuple[int, int]:
        c = self.montage.n_channels
        if self.affected_channel_range is None:
            return (max(1, -(-c // 3)), c)
        lo, hi = self.affected_channel_range
        return (min(lo, c), min(hi, c))


# -- labeling and windowing ------------------------------------------------------


def consensus_label(window_span: tuple[float, float],
                    tracks: list[AnnotationTrack] | tuple[AnnotationTrack, ...],
                    min_overlap_s: float = DEFAULT_MIN_OVERLAP_S) -> int:
    """1 iff every annotator marks >= min_overlap_s of seizure in the span."""
    if min_overlap_s < 0:
        raise ValueError("min_overlap_s must be >= 0")
    if len(tracks) < 1:
        raise ValueError("consensus label needs at least one annotation track")
    start_s, end_s = window_span
    for track in tracks:
        if track.overlap_with(start_s, end_s) < min_overlap_s:
            return 0
    return 1


def make_windows(rec: Recording, window_s: float = DEFAULT_WINDOW_S,
                 min_overlap_s: float = DEFAULT_MIN_OVERLAP_S) -> list[EegWindow]:
    """Cut non-overlapping windows; trailing remainder samples are dropped."""
    samples_f = window_s * rec.sampling_rate_hz
    samples = int(round(samples_f))
    if samples < 1 or abs(samples_f - samples) > 1e-9:
        raise ValueError(
            f"window_s * sampling_rate must be an integer >= 1, got {samples_f}")
    n = rec.n_samples // samples
    windows = []
    for i in range(n):
        t0 = i * window_s
        label = consensus_label((t0, t0 + window_s), rec.annotations, min_overlap_s) \
            if rec.annotations else 0
        windows.append(EegWindow(
            x=rec.signal[:, i * samples:(i + 1) * samples],
            y=label, neonate_id=rec.neonate_id, offset_s=t0))
    return windows


def windows_for_cohort(recordings: list[Recording],
                       window_s: float = DEFAULT_WINDOW_S,
                       min_overlap_s: float = DEFAULT_MIN_OVERLAP_S) -> list[EegWindow]:
    out: list[EegWindow] = []
    for rec in recordings:
        out.extend(make_windows(rec, window_s, min_overlap_s))
    return out


def patient_folds(neonate_ids, k: int, seed: int) -> FoldSplit:
    """Deterministic patient-wise k-fold split; fold sizes differ by <= 1."""
    ids = list(neonate_ids)
    if k <= 0:
        raise ValueError("k must be positive")
    if len(set(ids)) != len(ids):
        raise ValueError("neonate ids must be unique")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} neonates")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(ids)), k)
    folds = []
    for chunk in chunks:
        test = tuple(shuffled[i] for i in chunk)
        train = tuple(x for x in shuffled if x not in test)
        folds.append((train, test))
    return FoldSplit(tuple(folds))


# -- synthetic cohort ------------------------------------------------------------


def _ar2_background(rng: np.random.Generator, n_channels: int, n_samples: int,
                    peak_freq_hz: float, fs: float, gain: float) -> np.ndarray:
    """Colored background noise from a resonant order-2 autoregressive filter."""
    radius = 0.95
    omega = 2.0 * np.pi * peak_freq_hz / fs
    a1 = 2.0 * radius * np.cos(omega)
    a2 = -radius * radius
    noise = rng.standard_normal((n_channels, n_samples))
    sig = lfilter([1.0], [1.0, -a1, -a2], noise, axis=1)
    sig /= sig.std(axis=1, keepdims=True)
    return sig * (gain * _BACKGROUND_RMS_UV)


def _place_events(rng: np.random.Generator, duration_s: float, rate_per_hour: float,
                  dur_range: tuple[float, float], min_gap_s: float = 20.0,
                  margin_s: float = 5.0) -> list[tuple[float, float]]:
    n_target = rng.poisson(rate_per_hour * duration_s / 3600.0)
    events: list[tuple[float, float]] = []
    for _ in range(n_target):
        dur = rng.uniform(*dur_range)
        hi = duration_s - dur - margin_s
        if hi <= margin_s:
            continue
        for _attempt in range(64):
            start = rng.uniform(margin_s, hi)
            ok = all(start + dur + min_gap_s <= s or e + min_gap_s <= start
                     for s, e in events)
            if ok:
                events.append((start, start + dur))
                break
    events.sort()
    return events


def _spike_wave(t: np.ndarray, freq_hz: float, phase: float) -> np.ndarray:
    w = 2.0 * np.pi * freq_hz * t
    return (np.sin(w + phase)
            + 0.5 * np.sin(2.0 * w + 2.0 * phase)
            + 0.25 * np.sin(3.0 * w + 3.0 * phase))


def _jittered_track(rng: np.random.Generator, events, jitter_s: float,
                    duration_s: float, annotator_id: str) -> AnnotationTrack:
    out = []
    for s, e in events:
        s2 = np.clip(s + rng.uniform(-jitter_s, jitter_s), 0.0, duration_s)
        e2 = np.clip(e + rng.uniform(-jitter_s, jitter_s), 0.0, duration_s)
        if e2 - s2 < 0.5:  # degenerate after clipping; keep a sliver of the event
            s2, e2 = max(0.0, min(s, duration_s - 0.5)), min(duration_s, s + 0.5)
        out.append((float(s2), float(e2)))
    return AnnotationTrack(annotator_id, tuple(out))


# Independent seeded streams per recording: traits / background / event
# placement / waveform injection / annotator jitter. Event placement having
# its own stream lets synth_event_schedule() re-derive the true intervals
# without generating any signal.
_STREAM_TRAITS, _STREAM_BG, _STREAM_EVENTS, _STREAM_WAVE, _STREAM_ANNOT = range(1, 6)


def _stream(cfg: SynthConfig, which: int, idx: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 7919 + which, idx])


def _recording_duration(cfg: SynthConfig) -> tuple[int, float]:
    n_samples = int(round(cfg.minutes_per_neonate * 60.0 * cfg.sampling_rate_hz))
    return n_samples, n_samples / cfg.sampling_rate_hz


def synth_event_schedule(cfg: SynthConfig) -> dict[str, tuple[tuple[float, float], ...]]:
    """True (pre-jitter) seizure intervals per neonate, as synth_cohort injects."""
    _, duration_s = _recording_duration(cfg)
    schedule = {}
    for i in range(cfg.n_neonates):
        events = _place_events(_stream(cfg, _STREAM_EVENTS, i), duration_s,
                               cfg.seizure_rate_per_hour,
                               cfg.event_duration_range_s)
        schedule[f"n{i:02d}"] = tuple(events)
    return schedule


def synth_cohort(cfg: SynthConfig) -> list[Recording]:
    """Generate a reproducible synthetic cohort.

    Background is per-neonate-tinted AR(2) noise; seizures are rhythmic
    spike-wave bursts with an amplitude ramp injected on a random channel
    subset; each annotator track is the true intervals with independent
    boundary jitter.
    """
    fs = cfg.sampling_rate_hz
    n_samples, duration_s = _recording_duration(cfg)
    c = cfg.montage.n_channels
    aff_lo, aff_hi = cfg.resolved_affected_range()
    recordings = []
    for i in range(cfg.n_neonates):
        traits = _stream(cfg, _STREAM_TRAITS, i)
        gain = traits.uniform(*cfg.background_gain_range)
        bg_freq = traits.uniform(*cfg.background_freq_range_hz)
        sz_freq = traits.uniform(*cfg.seizure_freq_range_hz)
        n_affected = int(traits.integers(aff_lo, aff_hi + 1))

        signal = _ar2_background(_stream(cfg, _STREAM_BG, i), c, n_samples,
                                 bg_freq, fs, gain)
        events = _place_events(_stream(cfg, _STREAM_EVENTS, i), duration_s,
                               cfg.seizure_rate_per_hour,
                               cfg.event_duration_range_s)
        wave_rng = _stream(cfg, _STREAM_WAVE, i)
        for start_s, end_s in events:
            n0, n1 = int(round(start_s * fs)), int(round(end_s * fs))
            t = np.arange(n1 - n0) / fs
            freq = sz_freq * wave_rng.uniform(0.92, 1.08)
            phase = wave_rng.uniform(0.0, 2.0 * np.pi)
            wave = _spike_wave(t, freq, phase)
            ramp_s = min(5.0, (end_s - start_s) / 3.0)
            env = np.minimum(1.0, np.minimum(t, t[::-1]) / ramp_s)
            amp = wave_rng.uniform(*cfg.seizure_amplitude_range) \
                * gain * _BACKGROUND_RMS_UV
            chans = wave_rng.choice(c, size=n_affected, replace=False)
            for ch in chans:
                ch_gain = wave_rng.uniform(0.75, 1.25)
                signal[ch, n0:n1] += amp * ch_gain * env * wave

        annot_rng = _stream(cfg, _STREAM_ANNOT, i)
        tracks = [
            _jittered_track(annot_rng, events, cfg.annotator_jitter_s,
                            duration_s, f"expert-{a + 1}")
            for a in range(cfg.n_annotators)
        ]
        recordings.append(Recording(
            neonate_id=f"n{i:02d}",
            signal=signal.astype(np.float32),
            montage=cfg.montage,
            annotations=tracks,
            sampling_rate_hz=fs,
            recording_id=f"rec{i:02d}",
        ))
    return recordings


def cohort_with_montage(cfg: SynthConfig, montage: Montage) -> SynthConfig:
    """Same generator settings re-targeted at another montage."""
    return replace(cfg, montage=montage, affected_channel_range=None)


# -- manifest / signal-file round trip --------------------------------------------


def save_cohort(recordings: list[Recording], out_dir, cohort_meta: dict | None = None) -> Path:
    """Write manifest.json plus one raw float32 signal file per recording."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in recordings:
        fname = f"{rec.recording_id}.f32"
        (out / fname).write_bytes(
            np.ascontiguousarray(rec.signal, dtype="<f4").tobytes())
        entries.append({
            "id": rec.recording_id,
            "neonate_id": rec.neonate_id,
            "fs": rec.sampling_rate_hz,
            "n_samples": rec.n_samples,
            "channels": list(rec.montage.channels),
            "montage": rec.montage.name,
            "signal_file": fname,
            "annotations": [
                [[s, e] for s, e in track.events] for track in rec.annotations
            ],
        })
    manifest = {"cohort": cohort_meta or {}, "recordings": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_entry(manifest_dir: Path, entry: dict) -> Recording:
    channels = entry["channels"]
    n_samples = int(entry["n_samples"])
    sig_path = manifest_dir / entry["signal_file"]
    if not sig_path.exists():
        raise DataFormatError(f"missing signal file: {sig_path}")
    raw = sig_path.read_bytes()
    expected = 4 * len(channels) * n_samples
    if len(raw) != expected:
        raise DataFormatError(
            f"{sig_path}: shape mismatch, file is {len(raw)} bytes but manifest "
            f"declares {len(channels)} channels x {n_samples} samples "
            f"({expected} bytes)")
    signal = np.frombuffer(raw, dtype="<f4").reshape(len(channels), n_samples)
    if not np.isfinite(signal).all():
        raise DataFormatError(f"{sig_path}: non-finite sample")
    tracks = [
        AnnotationTrack(f"expert-{a + 1}", tuple((float(s), float(e)) for s, e in evs))
        for a, evs in enumerate(entry.get("annotations", []))
    ]
    montage = Montage(entry.get("montage", "custom"), tuple(channels))
    return Recording(
        neonate_id=entry["neonate_id"],
        signal=signal.copy(),
        montage=montage,
        annotations=tracks,
        sampling_rate_hz=float(entry["fs"]),
        recording_id=entry["id"],
    )


def _read_manifest(manifest_path) -> tuple[Path, dict]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataFormatError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    return path.parent, manifest


def load_recording(manifest_path, recording_id: str) -> Recording:
    """Load and validate one recording declared in a manifest."""
    base, manifest = _read_manifest(manifest_path)
    for entry in manifest.get("recordings", []):
        if entry["id"] == recording_id:
            return _load_entry(base, entry)
    raise DataFormatError(f"recording {recording_id!r} not found in manifest")


def load_cohort(manifest_path) -> list[Recording]:
    base, manifest = _read_manifest(manifest_path)
    return [_load_entry(base, entry) for entry in manifest.get("recordings", [])]
