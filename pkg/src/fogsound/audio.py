"""WAV I/O, PCM framing, clip segmentation and the synthetic labelled corpus.

Only the recorder's native format is accepted: RIFF/WAVE, PCM, mono,
16-bit little-endian. Anything else is rejected rather than converted.
"""
from __future__ import annotations

import csv
import io
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    InvalidClass,
    InvalidFrameSize,
    IoFailure,
    MalformedHeader,
    NotFound,
    UnsupportedFormat,
)

SAMPLE_RATE = 16_000
FRAME_SIZE = 4096
SEGMENT_SECONDS = 4.0
WAV_HEADER_BYTES = 44
N_CLASSES = 10

CLASS_NAMES = (
    "air_conditioner",
    "car_horn",
    "children_playing",
    "dog_bark",
    "drilling",
    "engine_idling",
    "gun_shot",
    "jackhammer",
    "siren",
    "street_music",
)

INDEX_FILE = "index.csv"


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    channels: int = 1

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype="<i2")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if self.channels != 1:
            raise UnsupportedFormat(f"only mono clips are supported, got {self.channels} channels")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if s.ndim != 1:
            raise ValueError("samples must be one-dimensional")

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return (self.sample_rate_hz == other.sample_rate_hz
                and np.array_equal(self.samples, other.samples))

    __hash__ = None

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def to_bytes(self) -> bytes:
        return self.samples.tobytes()

    def as_float(self) -> np.ndarray:
        """Samples scaled to [-1, 1)."""
        return self.samples.astype(np.float64) / 32768.0


@dataclass(frozen=True)
class Frame:
    data: bytes
    index: int


@dataclass(frozen=True)
class LabeledClip:
    clip: AudioClip
    class_id: int

    def __post_init__(self):
        if not 0 <= self.class_id < N_CLASSES:
            raise InvalidClass(f"class_id {self.class_id} outside [0, {N_CLASSES - 1}]")


@dataclass
class LoadedDataset:
    clips: list[LabeledClip] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.clips)

    def __iter__(self) -> Iterator[LabeledClip]:
        return iter(self.clips)


# ---------------------------------------------------------------- WAV codec

def wav_from_bytes(data: bytes) -> AudioClip:
    """Decode an in-memory WAV image. Extra chunks before ``data`` are skipped."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader("missing RIFF/WAVE signature")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise MalformedHeader("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", data, body)
        elif cid == b"data":
            if fmt is None:
                raise MalformedHeader("data chunk precedes fmt chunk")
            audio_format, channels, rate, _, _, bits = fmt
            if audio_format != 1:
                raise UnsupportedFormat(f"format code {audio_format} is not PCM")
            if channels != 1:
                raise UnsupportedFormat(f"{channels}-channel audio is not supported")
            if bits != 16:
                raise UnsupportedFormat(f"{bits}-bit audio is not supported")
            if rate <= 0:
                raise MalformedHeader("sample rate must be positive")
            payload = data[body:body + size]
            if len(payload) != size or size % 2:
                raise MalformedHeader("data chunk length inconsistent with file")
            return AudioClip(np.frombuffer(payload, dtype="<i2"), rate)
        pos = body + size + (size & 1)
    raise MalformedHeader("no fmt/data chunk found")


def load_wav(path) -> AudioClip:
    path = Path(path)
    if not path.is_file():
        raise NotFound(str(path))
    return wav_from_bytes(path.read_bytes())


def wav_bytes(clip: AudioClip) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate_hz)
        w.writeframes(clip.to_bytes())
    return buf.getvalue()


def write_wav(clip: AudioClip, path) -> int:
    """Write ``clip`` with a canonical 44-byte header; return the file size."""
    data = wav_bytes(clip)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(data)


def wav_size(n_samples: int) -> int:
    return WAV_HEADER_BYTES + 2 * n_samples


# ------------------------------------------------------- framing / segmenting

def frame_stream(clip: AudioClip, frame_size: int = FRAME_SIZE) -> list[Frame]:
    if frame_size <= 0:
        raise InvalidFrameSize(f"frame_size must be positive, got {frame_size}")
    raw = clip.to_bytes()
    n = math.ceil(len(raw) / frame_size)
    frames = []
    for i in range(n):
        chunk = raw[i * frame_size:(i + 1) * frame_size]
        frames.append(Frame(chunk.ljust(frame_size, b"\0"), i))
    return frames


def unframe(frames: Sequence[Frame], n_bytes: int) -> bytes:
    return b"".join(f.data for f in frames)[:n_bytes]


def segment(clip: AudioClip, seg_seconds: float = SEGMENT_SECONDS) -> list[AudioClip]:
    if seg_seconds <= 0:
        raise ValueError("seg_seconds must be positive")
    n = int(round(seg_seconds * clip.sample_rate_hz))
    count = len(clip) // n
    return [AudioClip(clip.samples[i * n:(i + 1) * n], clip.sample_rate_hz)
            for i in range(count)]


# ----------------------------------------------------------- synthetic corpus

def class_frequency(class_id: int) -> float:
    return 200.0 + 150.0 * class_id


def synth_clip(class_id: int, duration_s: float, seed: int,
               sample_rate_hz: int = SAMPLE_RATE) -> LabeledClip:
    """Tone at the class fundamental plus white noise at 20 dB SNR.

    A pure function of its arguments: the noise generator is keyed on
    ``(seed, class_id)``.
    """
    if not 0 <= class_id < N_CLASSES:
        raise InvalidClass(f"class_id {class_id} outside [0, {N_CLASSES - 1}]")
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    amp = 0.5
    tone = amp * np.sin(2 * np.pi * class_frequency(class_id) * t)
    noise_std = math.sqrt(amp ** 2 / 2 / 10 ** (20 / 10))
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, class_id])
    x = tone + rng.normal(0.0, noise_std, n)
    pcm = np.clip(np.round(x * 32767), -32768, 32767).astype("<i2")
    return LabeledClip(AudioClip(pcm, sample_rate_hz), class_id)


def corpus_seed(base_seed: int, class_id: int, index: int) -> int:
    return (base_seed * 1_000_003 + class_id * 10_007 + index) & 0xFFFFFFFFFFFFFFFF


def synth_corpus(clips_per_class: int, duration_s: float, seed: int) -> list[LabeledClip]:
    return [synth_clip(k, duration_s, corpus_seed(seed, k, j))
            for k in range(N_CLASSES) for j in range(clips_per_class)]


def write_corpus(out_dir, clips_per_class: int, duration_s: float, seed: int) -> int:
    """Write a fold-layout synthetic corpus plus ``index.csv``; return the WAV count."""
    root = Path(out_dir)
    rows = []
    try:
        for k in range(N_CLASSES):
            for j in range(clips_per_class):
                fold = j % 10 + 1
                name = f"{k}-{j:04d}.wav"
                d = root / f"fold{fold}"
                d.mkdir(parents=True, exist_ok=True)
                write_wav(synth_clip(k, duration_s, corpus_seed(seed, k, j)).clip, d / name)
                rows.append((name, fold, k))
        with open(root / INDEX_FILE, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file_name", "fold", "class_id"])
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(rows)


# UrbanSound8K ships metadata with different column names.
_COLUMN_ALIASES = {
    "file_name": ("file_name", "slice_file_name"),
    "fold": ("fold",),
    "class_id": ("class_id", "classID"),
}


def _find_index(root: Path) -> Path | None:
    for candidate in (root / INDEX_FILE, root / "metadata" / "UrbanSound8K.csv",
                      root / "UrbanSound8K.csv"):
        if candidate.is_file():
            return candidate
    return None


def _fold_dir(root: Path, fold: str) -> Path:
    for base in (root, root / "audio"):
        if (base / f"fold{fold}").is_dir():
            return base / f"fold{fold}"
    return root / f"fold{fold}"


def load_dataset_dir(root) -> LoadedDataset:
    """Load every readable clip listed in the index; unreadable files are skipped and counted."""
    root = Path(root)
    if not root.is_dir():
        raise NotFound(str(root))
    index = _find_index(root)
    if index is None:
        raise EmptyDataset(f"no index CSV under {root}")
    out = LoadedDataset()
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = {}
        for key, aliases in _COLUMN_ALIASES.items():
            found = [a for a in aliases if a in (reader.fieldnames or ())]
            if not found:
                raise EmptyDataset(f"index {index} lacks a {key} column")
            cols[key] = found[0]
        for row in reader:
            path = _fold_dir(root, row[cols["fold"]]) / row[cols["file_name"]]
            try:
                clip = load_wav(path)
                out.clips.append(LabeledClip(clip, int(row[cols["class_id"]])))
            except (NotFound, MalformedHeader, UnsupportedFormat, InvalidClass, ValueError):
                out.skipped += 1
    if not out.clips:
        raise EmptyDataset(f"no loadable clips under {root}")
    return out
