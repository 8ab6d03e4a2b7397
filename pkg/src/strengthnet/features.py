"""Waveform handling and the two feature views used by the pipeline.

* log-mel spectrograms (80 channels, 50 ms frames, 12.5 ms hop) feed the network;
* 384-dim utterance functionals feed the ranking function.

Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.fft import dct
from scipy.io import wavfile

from .errors import DegenerateChannel, InvalidInput, TooShort

SAMPLE_RATE = 16000
FRAME_LENGTH = 800  # 50 ms
HOP_LENGTH = 200  # 12.5 ms
N_FFT = 1024
N_MELS = 80
LOG_FLOOR = 1e-10

# functional-feature framing (25 ms / 10 ms); F0 uses a longer 40 ms window
LLD_FRAME = 400
LLD_HOP = 160
F0_WINDOW = 640
F0_MIN, F0_MAX = 60.0, 400.0
VOICING_THRESHOLD = 0.45
N_MFCC = 12
N_MFCC_BANDS = 26
MIN_FUNCTIONAL_SAMPLES = SAMPLE_RATE // 10

LLD_NAMES = ["zcr", "rms", "f0", "voice_prob"] + [f"mfcc{i}" for i in range(1, N_MFCC + 1)]
FUNCTIONALS = [
    "mean", "std", "skewness", "kurtosis", "min", "max", "range",
    "rel_argmin", "rel_argmax", "slope", "offset", "regression_mse",
]
SERIES_NAMES = LLD_NAMES + [f"{name}_delta" for name in LLD_NAMES]
FEATURE_NAMES = [f"{s}__{f}" for s in SERIES_NAMES for f in FUNCTIONALS]
FUNCTIONAL_DIM = len(FEATURE_NAMES)
assert FUNCTIONAL_DIM == 384


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a PCM/float WAV file; multi-channel audio is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, int(rate))


def write_wav(path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def resample(w: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    if len(w.samples) == 0:
        raise InvalidInput("cannot resample an empty waveform")
    if target_rate <= 0:
        raise InvalidInput(f"target_rate must be positive, got {target_rate}")
    if w.sample_rate == target_rate:
        return w
    g = gcd(w.sample_rate, target_rate)
    y = signal.resample_poly(w.samples, target_rate // g, w.sample_rate // g)
    return Waveform(y, target_rate)


def load_audio(path, target_rate: int = SAMPLE_RATE) -> Waveform:
    return resample(read_wav(path), target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, each scaled to unit area in Hz (n_mels x n_fft//2+1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights * (2.0 / (upper - lower))


_MEL_FB = mel_filterbank()
_HANN = signal.get_window("hann", FRAME_LENGTH, fftbins=True)


def num_frames(n_samples: int, frame_length=FRAME_LENGTH, hop=HOP_LENGTH) -> int:
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // hop + 1


def _frame(x, frame_length, hop):
    n = num_frames(len(x), frame_length, hop)
    return np.lib.stride_tricks.sliding_window_view(x, frame_length)[::hop][:n]


def mel_spectrogram(w: Waveform) -> np.ndarray:
    """Log-mel energies, shape (T, 80), with T = (N - 800) // 200 + 1 (no end padding)."""
    if w.sample_rate != SAMPLE_RATE:
        raise InvalidInput(f"mel_spectrogram expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    if len(w.samples) < FRAME_LENGTH:
        raise TooShort(f"need at least {FRAME_LENGTH} samples, got {len(w.samples)}")
    frames = _frame(w.samples, FRAME_LENGTH, HOP_LENGTH) * _HANN
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    return np.log(np.maximum(power @ _MEL_FB.T, LOG_FLOOR))


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise InvalidInput("mean and std must be vectors of equal length")
        if np.any(std <= 0):
            raise DegenerateChannel("normalization std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        d = json.loads(text)
        return cls(np.array(d["mean"]), np.array(d["std"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text())


def fit_normalization(training_mels) -> NormalizationStats:
    """Global per-channel mean/std over every frame of the training spectrograms."""
    mels = [np.asarray(m, dtype=np.float64) for m in training_mels]
    if not mels:
        raise InvalidInput("need at least one spectrogram to fit normalization")
    frames = np.concatenate(mels, axis=0)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    flat = np.flatnonzero(std < 1e-12)
    if flat.size:
        raise DegenerateChannel(f"zero variance in channel(s) {flat.tolist()}")
    return NormalizationStats(mean, std)


def apply_normalization(m: np.ndarray, s: NormalizationStats) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != s.mean.shape[0]:
        raise InvalidInput(f"spectrogram shape {m.shape} incompatible with {s.mean.shape[0]} channels")
    return (m - s.mean) / s.std


def invert_normalization(m: np.ndarray, s: NormalizationStats) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != s.mean.shape[0]:
        raise InvalidInput(f"spectrogram shape {m.shape} incompatible with {s.mean.shape[0]} channels")
    return m * s.std + s.mean


# ---------------------------------------------------------------------------
# utterance functionals


def zero_crossing_rate(frames: np.ndarray) -> np.ndarray:
    signs = np.signbit(frames)
    return np.count_nonzero(signs[:, 1:] != signs[:, :-1], axis=1) / (frames.shape[1] - 1)


def pitch_track(x: np.ndarray, starts: np.ndarray, sample_rate=SAMPLE_RATE):
    """Per-frame (F0 Hz, voicing probability) by normalized autocorrelation.

    Unvoiced frames get F0 = 0.
    """
    padded = np.concatenate([x, np.zeros(F0_WINDOW)])
    idx = starts[:, None] + np.arange(F0_WINDOW)[None, :]
    frames = padded[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    min_lag = int(np.floor(sample_rate / F0_MAX))
    max_lag = int(np.ceil(sample_rate / F0_MIN))

    spec = np.fft.rfft(frames, n=2 * F0_WINDOW, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, : max_lag + 2]
    sq = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(max_lag + 2)
    head = sq[:, F0_WINDOW - lags]  # energy of x[0 : L - lag]
    tail = sq[:, -1:] - sq[:, lags]  # energy of x[lag : L]
    denom = np.sqrt(head * tail)
    nacf = np.where(denom > 1e-12, acf / np.maximum(denom, 1e-300), 0.0)

    f0 = np.zeros(len(frames))
    prob = np.zeros(len(frames))
    for i, r in enumerate(nacf):
        seg = r[min_lag : max_lag + 1]
        best = seg.max()
        if best <= 0:
            continue
        # earliest local peak close to the global best avoids octave-down errors
        peaks = np.flatnonzero((seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
        good = peaks[seg[peaks] >= 0.95 * best] if peaks.size else np.array([], dtype=int)
        k = int(good[0]) if good.size else int(np.argmax(seg))
        lag = k + min_lag
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        curv = a - 2 * b + c
        shift = 0.5 * (a - c) / curv if curv < 0 else 0.0
        prob[i] = float(np.clip(b, 0.0, 1.0))
        if prob[i] >= VOICING_THRESHOLD:
            f0[i] = sample_rate / (lag + shift)
    return f0, prob


_MFCC_FB = mel_filterbank(N_MFCC_BANDS, 512, SAMPLE_RATE)
_HAMMING = signal.get_window("hamming", LLD_FRAME, fftbins=True)


def mfcc(frames: np.ndarray) -> np.ndarray:
    """MFCC 1..12 from pre-emphasized, Hamming-windowed frames."""
    emph = np.concatenate([frames[:, :1], frames[:, 1:] - 0.97 * frames[:, :-1]], axis=1)
    power = np.abs(np.fft.rfft(emph * _HAMMING, n=512, axis=1)) ** 2
    logmel = np.log(np.maximum(power @ _MFCC_FB.T, LOG_FLOOR))
    return dct(logmel, type=2, norm="ortho", axis=1)[:, 1 : N_MFCC + 1]


def deltas(series: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along axis 0 with edge replication."""
    n = series.shape[0]
    padded = np.pad(series, ((width, width), (0, 0)), mode="edge")
    num = sum(k * (padded[width + k : width + k + n] - padded[width - k : width - k + n])
              for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def functionals(series: np.ndarray) -> np.ndarray:
    """12 statistics for every column of an (n_frames, n_series) matrix -> (n_series, 12)."""
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered**2).mean(axis=0)
    std = np.sqrt(var)
    safe = var > 1e-20
    skew = np.where(safe, (centered**3).mean(axis=0) / np.where(safe, var, 1.0) ** 1.5, 0.0)
    kurt = np.where(safe, (centered**4).mean(axis=0) / np.where(safe, var, 1.0) ** 2 - 3.0, 0.0)
    lo, hi = x.min(axis=0), x.max(axis=0)
    denom = max(n - 1, 1)
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    stt = (tc**2).sum()
    slope = (tc @ centered) / stt if stt > 0 else np.zeros(x.shape[1])
    offset = mean - slope * t.mean()
    resid = x - (offset + slope * t[:, None])
    mse = (resid**2).mean(axis=0)
    return np.stack([
        mean, std, skew, kurt, lo, hi, hi - lo,
        x.argmin(axis=0) / denom, x.argmax(axis=0) / denom,
        slope, offset, mse,
    ], axis=1)


def low_level_descriptors(w: Waveform) -> np.ndarray:
    """The 16 frame-level descriptors, shape (n_frames, 16)."""
    x = w.samples
    frames = _frame(x, LLD_FRAME, LLD_HOP)
    starts = np.arange(len(frames)) * LLD_HOP
    zcr = zero_crossing_rate(frames)
    rms = np.sqrt((frames**2).mean(axis=1))
    f0, prob = pitch_track(x, starts, w.sample_rate)
    return np.column_stack([zcr, rms, f0, prob, mfcc(frames)])


def functional_features(w: Waveform) -> np.ndarray:
    """Deterministic 384-dim utterance vector: 32 series x 12 functionals, series-major."""
    if w.sample_rate != SAMPLE_RATE:
        raise InvalidInput(f"functional_features expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    if len(w.samples) < MIN_FUNCTIONAL_SAMPLES:
        raise TooShort(f"need at least {MIN_FUNCTIONAL_SAMPLES} samples (100 ms), got {len(w.samples)}")
    lld = low_level_descriptors(w)
    series = np.concatenate([lld, deltas(lld)], axis=1)
    out = functionals(series).reshape(-1)
    assert out.shape == (FUNCTIONAL_DIM,)
    return out


# ---------------------------------------------------------------------------
# feature cache
#
# mel record layout, little-endian:
#   u32 id_len | utf-8 id | u32 T | u32 C | float32[T*C] row-major

_U32 = struct.Struct("<I")


def write_mel_record(path, utterance_id: str, mel: np.ndarray) -> None:
    mel = np.ascontiguousarray(mel, dtype="<f4")
    uid = utterance_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_U32.pack(len(uid)))
        fh.write(uid)
        fh.write(struct.pack("<II", *mel.shape))
        fh.write(mel.tobytes())


def read_mel_record(path) -> tuple[str, np.ndarray]:
    data = Path(path).read_bytes()
    (n,) = _U32.unpack_from(data, 0)
    uid = data[4 : 4 + n].decode("utf-8")
    t, c = struct.unpack_from("<II", data, 4 + n)
    start = 12 + n
    mel = np.frombuffer(data, dtype="<f4", count=t * c, offset=start).reshape(t, c)
    if start + 4 * t * c != len(data):
        raise InvalidInput(f"{path}: trailing or missing bytes in mel record")
    return uid, mel.astype(np.float32)
