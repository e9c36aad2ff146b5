"""Spectral feature extraction.

The full profile produces a 193-dimensional vector laid out as
``[mfcc(40) | chroma(12) | mel(128) | contrast(7) | tonnetz(6)]``, each
family averaged over STFT frames. Serialised as little-endian float64 the
vector is always 1,544 bytes, whatever the clip duration.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import AudioClip
from .errors import EmptyClip, InvalidLength, InvalidRange, WrongDimension

N_FFT = 2048
HOP = 512
N_MELS = 128
N_MFCC = 40
N_CHROMA = 12
N_CONTRAST_BANDS = 6
CONTRAST_FMIN = 200.0
CONTRAST_QUANTILE = 0.02
LOG_FLOOR = 1e-10

LAYOUT = (("mfcc", N_MFCC), ("chroma", N_CHROMA), ("mel", N_MELS),
          ("contrast", N_CONTRAST_BANDS + 1), ("tonnetz", 6))
FEATURE_DIM = sum(n for _, n in LAYOUT)  # 193
FEATURE_BYTES = FEATURE_DIM * 8  # 1544

PROFILES = {"full": FEATURE_DIM, "mfcc40": N_MFCC}


@dataclass(frozen=True, eq=False)
class Spectrogram:
    magnitudes: np.ndarray  # (freq_bins, frames)
    n_fft: int
    hop: int
    sample_rate_hz: int

    @property
    def power(self) -> np.ndarray:
        return self.magnitudes ** 2

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def stft(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> Spectrogram:
    """Hann-windowed magnitude STFT with centred reflect padding."""
    if len(clip) == 0:
        raise EmptyClip("cannot transform an empty clip")
    if not _is_pow2(n_fft) or not 0 < hop <= n_fft:
        raise ValueError("n_fft must be a power of two and 0 < hop <= n_fft")
    x = clip.as_float()
    pad = n_fft // 2
    x = np.pad(x, pad, mode="reflect" if len(x) > 1 else "constant")
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    frames = x[idx] * window
    mags = np.abs(np.fft.rfft(frames, axis=1)).T
    return Spectrogram(mags, n_fft, hop, clip.sample_rate_hz)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _mel_filterbank(n_mels, f_min, f_max, n_fft, rate):
    fft_freqs = np.linspace(0.0, rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (centre - lower)
    falling = (upper - fft_freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # Narrow low-frequency triangles can fall between FFT bins; keep the nearest bin.
    for i in np.flatnonzero(fb.max(axis=1) <= 0):
        fb[i, np.argmin(np.abs(fft_freqs - centre[i, 0]))] = 1.0
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = 8000.0,
                   n_fft: int = N_FFT, rate: int = 16_000) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    if not 0 <= f_min < f_max <= rate / 2:
        raise InvalidRange(f"need 0 <= f_min < f_max <= {rate / 2}, got {f_min}, {f_max}")
    return _mel_filterbank(n_mels, float(f_min), float(f_max), n_fft, rate)


def mel_centres(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


@lru_cache(maxsize=16)
def _dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct_ii(x, n_out: int | None = None) -> np.ndarray:
    """Orthonormal DCT-II along the last axis, keeping the first ``n_out`` terms."""
    x = np.asarray(x, dtype=float)
    n_in = x.shape[-1]
    n_out = n_in if n_out is None else n_out
    if not 0 < n_out <= n_in:
        raise InvalidLength(f"n_out must be in [1, {n_in}], got {n_out}")
    return x @ _dct_matrix(n_in, n_out).T


def idct_ii(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return c @ _dct_matrix(c.shape[-1], c.shape[-1])


@lru_cache(maxsize=8)
def _chroma_filterbank(n_fft: int, rate: int) -> np.ndarray:
    freqs = np.linspace(0.0, rate / 2, n_fft // 2 + 1)
    fb = np.zeros((N_CHROMA, len(freqs)))
    valid = freqs > 0
    # pitch classes counted from C; A440 sits nine semitones above C
    pc = (np.round(12 * np.log2(freqs[valid] / 440.0)).astype(int) + 9) % N_CHROMA
    fb[pc, np.flatnonzero(valid)] = 1.0
    fb.setflags(write=False)
    return fb


def _tonnetz_basis() -> np.ndarray:
    p = np.arange(N_CHROMA)
    rows = []
    for angle, r in ((7 * np.pi / 6, 1.0), (3 * np.pi / 2, 1.0), (2 * np.pi / 3, 0.5)):
        rows.append(r * np.sin(p * angle))
        rows.append(r * np.cos(p * angle))
    return np.array(rows)


TONNETZ_BASIS = _tonnetz_basis()


def _contrast_edges(rate: int) -> np.ndarray:
    edges = [0.0] + [CONTRAST_FMIN * 2 ** i for i in range(N_CONTRAST_BANDS)] + [rate / 2]
    return np.array(edges)


def spectral_contrast(spec: Spectrogram) -> np.ndarray:
    """Peak-to-valley log ratio per octave band, one row per band."""
    power = spec.power
    freqs = np.linspace(0.0, spec.sample_rate_hz / 2, power.shape[0])
    edges = _contrast_edges(spec.sample_rate_hz)
    out = np.zeros((len(edges) - 1, power.shape[1]))
    for b in range(len(edges) - 1):
        lo, hi = edges[b], edges[b + 1]
        sel = (freqs >= lo) & (freqs <= hi) if b == len(edges) - 2 else (freqs >= lo) & (freqs < hi)
        band = np.sort(power[sel], axis=0)
        q = max(1, int(round(CONTRAST_QUANTILE * band.shape[0])))
        valley = band[:q].mean(axis=0)
        peak = band[-q:].mean(axis=0)
        out[b] = np.log(np.maximum(peak, LOG_FLOOR)) - np.log(np.maximum(valley, LOG_FLOOR))
    return out


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None

    def family(self, name: str) -> np.ndarray:
        start = 0
        for fam, n in LAYOUT:
            if fam == name:
                return self.values[start:start + n]
            start += n
        raise KeyError(name)


def extract_features(clip: AudioClip, profile: str = "full") -> FeatureVector:
    """Frame-averaged feature vector for a non-empty clip.

    ``profile="mfcc40"`` returns only the 40 MFCC means; it is a cheap
    variant for classifier tests and never goes on the wire.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown feature profile {profile!r}")
    spec = stft(clip)
    power = spec.power
    rate = clip.sample_rate_hz
    mel_power = mel_filterbank(N_MELS, 0.0, rate / 2, spec.n_fft, rate) @ power
    log_mel = np.log(np.maximum(mel_power, LOG_FLOOR))
    mfcc = dct_ii(log_mel.T, N_MFCC)  # (frames, 40)
    if profile == "mfcc40":
        return FeatureVector(mfcc.mean(axis=0))

    chroma = _chroma_filterbank(spec.n_fft, rate) @ power
    peak = chroma.max(axis=0)
    chroma = np.divide(chroma, peak, out=np.zeros_like(chroma), where=peak > 0)

    l1 = chroma.sum(axis=0)
    chroma_l1 = np.divide(chroma, l1, out=np.zeros_like(chroma), where=l1 > 0)
    tonnetz = TONNETZ_BASIS @ chroma_l1

    contrast = spectral_contrast(spec)
    return FeatureVector(np.concatenate([
        mfcc.mean(axis=0),
        chroma.mean(axis=1),
        log_mel.mean(axis=1),
        contrast.mean(axis=1),
        tonnetz.mean(axis=1),
    ]))


def serialize_features(fv: FeatureVector) -> bytes:
    if len(fv) != FEATURE_DIM:
        raise WrongDimension(f"expected {FEATURE_DIM} values, got {len(fv)}")
    return struct.pack(f"<{FEATURE_DIM}d", *fv.values)


def deserialize_features(data: bytes) -> FeatureVector:
    if len(data) != FEATURE_BYTES:
        raise WrongDimension(f"expected {FEATURE_BYTES} bytes, got {len(data)}")
    return FeatureVector(np.frombuffer(data, dtype="<f8"))


def features_to_text(fv: FeatureVector) -> str:
    return "".join(f"{v!r}\n" for v in fv.values.tolist())


def features_from_text(text: str) -> FeatureVector:
    return FeatureVector([float(line) for line in text.split()])
