"""Log-mel front end: 8 kHz waveform -> spliced, subsampled 345-dim frames.

Pipeline: 25 ms Hann windows every 10 ms, 256-point FFT magnitude, 23 HTK mel
triangles over 0-4000 Hz, natural log with a 1e-10 floor, +-7 frame context
splicing with edge replication, then every 10th frame (100 ms shift).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 8000
WIN_LENGTH = 200
HOP_LENGTH = 80
N_FFT = 256
N_MELS = 23
CONTEXT = 7
SUBSAMPLING = 10
LOG_FLOOR = 1e-10
FEATURE_DIM = N_MELS * (2 * CONTEXT + 1)
FRAME_SHIFT_MS = 100


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise FrontendError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or not np.all(np.isfinite(samples)):
            raise FrontendError("waveform must be a finite 1-D signal")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann_window(n: int = WIN_LENGTH) -> np.ndarray:
    # periodic Hann, as torchaudio builds it
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_raw_frames(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def num_frames(n_samples: int) -> int:
    return -(-num_raw_frames(n_samples) // SUBSAMPLING)


def logmel(w: Waveform) -> np.ndarray:
    if not isinstance(w, Waveform):
        w = Waveform(w)
    n = len(w.samples)
    if n < WIN_LENGTH:
        raise FrontendError(f"need at least {WIN_LENGTH} samples, got {n}")
    t_raw = num_raw_frames(n)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(t_raw)[:, None]
    frames = w.samples[idx] * hann_window()
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    energies = mag @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR))


def splice(frames: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    t_raw = frames.shape[0]
    padded = np.pad(frames, ((context, context), (0, 0)), mode="edge")
    return np.concatenate([padded[k:k + t_raw] for k in range(2 * context + 1)], axis=1)


def subsample(spliced: np.ndarray, factor: int = SUBSAMPLING) -> np.ndarray:
    if factor < 1:
        raise FrontendError("subsampling factor must be >= 1")
    return np.asarray(spliced)[::factor]


def extract(w: Waveform) -> np.ndarray:
    """Full pipeline; returns a ``T x 345`` feature matrix."""
    return subsample(splice(logmel(w)))


# -- file formats ---------------------------------------------------------------

def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise FrontendError(f"{path}: expected 16-bit mono PCM")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, sr)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


MAGIC = "EENDARRAY 1"


def write_array(path, arr: np.ndarray, **attrs) -> None:
    """Text header + little-endian float64 payload. See README for the grammar."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    lines = [MAGIC, "dtype float64", "shape " + " ".join(str(n) for n in arr.shape)]
    for key, value in attrs.items():
        if not key.isidentifier() or "\n" in str(value):
            raise ValueError(f"bad header attribute {key!r}")
        lines.append(f"{key} {value}")
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(arr.tobytes())


def read_array(path) -> tuple[np.ndarray, dict[str, str]]:
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").rstrip("\n")
        if first != MAGIC:
            raise FrontendError(f"{path}: not an array container")
        attrs: dict[str, str] = {}
        while True:
            line = f.readline()
            if not line:
                raise FrontendError(f"{path}: truncated header")
            line = line.decode("ascii").rstrip("\n")
            if line == "end_header":
                break
            key, _, value = line.partition(" ")
            attrs[key] = value
        payload = f.read()
    shape = tuple(int(n) for n in attrs.pop("shape").split())
    if attrs.pop("dtype") != "float64":
        raise FrontendError(f"{path}: only float64 payloads are supported")
    if len(payload) != 8 * int(np.prod(shape)):
        raise FrontendError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy(), attrs


def write_features(path, feats: np.ndarray) -> None:
    write_array(path, feats, frame_shift_ms=FRAME_SHIFT_MS)


def read_features(path) -> np.ndarray:
    feats, attrs = read_array(path)
    if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
        raise FrontendError(f"{path}: expected T x {FEATURE_DIM} features, got {feats.shape}")
    if int(attrs.get("frame_shift_ms", FRAME_SHIFT_MS)) != FRAME_SHIFT_MS:
        raise FrontendError(f"{path}: frame shift must be {FRAME_SHIFT_MS} ms")
    return feats


def load_features(path) -> np.ndarray:
    """Features from a .wav (through the pipeline) or a feature container."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return extract(read_wav(path))
    return read_features(path)
