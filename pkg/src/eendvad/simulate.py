"""Synthetic two-speaker conversations with exact labels and controllable overlap.

Speakers take turns. Each turn's onset is pulled back from the end of the
previous turn by an amount scaled by a single overlap knob; that knob is
bisected until the emitted labels reach the requested overlap ratio. Sources
are parametric (harmonic stack plus band-limited noise, distinct F0 per
speaker), so nothing here depends on a speech corpus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .frontend import SAMPLE_RATE, FEATURE_DIM, Waveform, num_frames, write_wav
from .scoring import Segment, write_rttm

FRAME_S = 0.1
OVERLAP_TOLERANCE = 0.05


class SimulationError(ValueError):
    pass


@dataclass
class DialogueConfig:
    num_speakers: int = 2
    duration_s: float = 30.0
    target_overlap: float = 0.45
    utterance_mean_s: float = 3.0
    utterance_std_s: float = 1.0
    gap_mean_s: float = 1.0
    gap_std_s: float = 0.5
    noise_snr_db: float | None = 30.0
    seed: int = 0

    def validate(self):
        if self.num_speakers != 2:
            raise SimulationError("only two-speaker dialogues are supported")
        if not self.duration_s > 0:
            raise SimulationError("duration_s must be positive")
        if not 0.0 <= self.target_overlap <= 1.0:
            raise SimulationError("target_overlap must lie in [0, 1]")
        if self.utterance_mean_s <= 0 or self.gap_mean_s < 0:
            raise SimulationError("utterance/gap means must be positive")


@dataclass
class GroundTruth:
    activity: np.ndarray  # C x T binary, 100 ms frames
    segments: list[Segment]
    duration_s: float
    recording: str = "rec"
    speakers: list[str] = field(default_factory=lambda: ["spk0", "spk1"])


def overlap_ratio(activity) -> float:
    """Frames with >= 2 active speakers over frames with >= 1; 0 without speech."""
    counts = np.asarray(activity).sum(axis=0)
    speech = np.count_nonzero(counts >= 1)
    return np.count_nonzero(counts >= 2) / speech if speech else 0.0


def activity_to_segments(activity: np.ndarray, recording: str, speakers, frame_s: float = FRAME_S):
    segs = []
    for c, row in enumerate(np.asarray(activity)):
        padded = np.concatenate([[0], row.astype(int), [0]])
        edges = np.flatnonzero(np.diff(padded))
        for on, off in zip(edges[::2], edges[1::2]):
            segs.append(Segment(recording, round(on * frame_s, 6), round((off - on) * frame_s, 6), speakers[c]))
    return sorted(segs, key=lambda s: (s.onset, s.speaker))


def segments_to_activity(segments, speakers, n_frames: int, frame_s: float = FRAME_S) -> np.ndarray:
    """Frame t is active when its start time lies inside a segment."""
    act = np.zeros((len(speakers), n_frames), dtype=np.int8)
    index = {s: i for i, s in enumerate(speakers)}
    for seg in segments:
        on = int(math.ceil(seg.onset / frame_s - 1e-9))
        off = int(math.ceil((seg.onset + seg.duration) / frame_s - 1e-9))
        act[index[seg.speaker], max(on, 0):min(off, n_frames)] = 1
    return act


# -- scheduling -------------------------------------------------------------------

@dataclass
class _Draws:
    utt: np.ndarray
    gap: np.ndarray
    pull: np.ndarray


def _draw(cfg: DialogueConfig, rng: np.random.Generator, n: int) -> _Draws:
    utt = np.maximum(rng.normal(cfg.utterance_mean_s, cfg.utterance_std_s, n), 0.5)
    gap = np.maximum(rng.normal(cfg.gap_mean_s, cfg.gap_std_s, n), FRAME_S)
    pull = rng.uniform(0.5, 1.0, n)
    return _Draws(utt, gap, pull)


def _schedule(d: _Draws, knob: float, n_frames: int) -> np.ndarray:
    """Turn-taking activity for one setting of the overlap knob in [0, 1]."""
    act = np.zeros((2, n_frames), dtype=np.int8)
    ends = [0.0, 0.0]
    prev_end = -d.gap[0]
    k = 0
    while True:
        spk = k % 2
        shift = (1.0 - knob) * d.gap[k] - knob * d.pull[k] * d.utt[k - 1 if k else 0]
        onset = max(prev_end + shift, ends[spk] + d.gap[k], 0.0) if k else 0.0
        on = int(round(onset / FRAME_S))
        off = on + max(1, int(round(d.utt[k] / FRAME_S)))
        if on >= n_frames:
            break
        act[spk, on:min(off, n_frames)] = 1
        ends[spk] = off * FRAME_S
        prev_end = off * FRAME_S
        k += 1
        if k >= len(d.utt):
            raise SimulationError("draw buffer exhausted; dialogue too long for turn buffer")
    return act


def schedule(cfg: DialogueConfig, rng: np.random.Generator, n_frames: int) -> np.ndarray:
    n_turns = int(4 * cfg.duration_s / max(cfg.utterance_mean_s * 0.25, 0.1)) + 16
    draws = _draw(cfg, rng, n_turns)
    lo, hi = 0.0, 1.0
    r_lo, r_hi = overlap_ratio(_schedule(draws, lo, n_frames)), overlap_ratio(_schedule(draws, hi, n_frames))
    target = cfg.target_overlap
    if not r_lo - OVERLAP_TOLERANCE <= target <= r_hi + OVERLAP_TOLERANCE:
        raise SimulationError(
            f"overlap target {target:.3f} unreachable; achievable range is [{r_lo:.3f}, {r_hi:.3f}]")
    best, best_err = None, math.inf
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        act = _schedule(draws, mid, n_frames)
        r = overlap_ratio(act)
        if abs(r - target) < best_err:
            best, best_err = act, abs(r - target)
        if r < target:
            lo = mid
        else:
            hi = mid
    for knob in (lo, hi):
        act = _schedule(draws, knob, n_frames)
        if abs(overlap_ratio(act) - target) < best_err:
            best, best_err = act, abs(overlap_ratio(act) - target)
    if best_err > OVERLAP_TOLERANCE:
        raise SimulationError(
            f"overlap target {target:.3f} missed by {best_err:.3f}; achievable range is [{r_lo:.3f}, {r_hi:.3f}]")
    return best


# -- audio ------------------------------------------------------------------------

def _voice(rng: np.random.Generator, f0: float, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / SAMPLE_RATE
    n_harm = int(3600 // f0)
    tilt = rng.uniform(0.6, 0.9)
    harm = sum(tilt ** k * np.sin((k + 1) * phase + rng.uniform(0, 2 * np.pi)) for k in range(n_harm))
    band_lo = rng.uniform(300, 1500)
    sos = signal.butter(4, [band_lo, min(band_lo * 2.2, 3900)], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    noise = signal.sosfilt(sos, rng.normal(size=n))
    src = harm / np.std(harm) + 0.5 * noise / np.std(noise)
    return src / np.std(src)


def _speaker_f0s(rng: np.random.Generator) -> tuple[float, float]:
    while True:
        f0 = rng.uniform(90, 260, 2)
        if max(f0) / min(f0) > 1.3:
            return float(f0[0]), float(f0[1])


def render(activity: np.ndarray, duration_s: float, rng: np.random.Generator,
           snr_db: float | None) -> Waveform:
    n = int(round(duration_s * SAMPLE_RATE))
    frame = int(FRAME_S * SAMPLE_RATE)
    mix = np.zeros(n)
    ramp = np.hanning(2 * 40)[:40]
    for c, f0 in enumerate(_speaker_f0s(rng)):
        gate = np.repeat(activity[c].astype(np.float64), frame)[:n]
        gate = np.pad(gate, (0, n - len(gate)))
        # fade in/out inside each segment so no energy leaks into silence
        edges = np.flatnonzero(np.diff(np.concatenate([[0], gate, [0]])))
        for on, off in zip(edges[::2], edges[1::2]):
            k = min(len(ramp), (off - on) // 2)
            gate[on:on + k] *= ramp[:k]
            gate[off - k:off] *= ramp[:k][::-1]
        mix += rng.uniform(0.7, 1.0) * gate * _voice(rng, f0, n)
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix *= 0.5 / peak
    if snr_db is not None:
        speech = mix[np.repeat(activity.max(axis=0), frame)[:n].astype(bool)]
        power = np.mean(speech ** 2) if speech.size else 0.25 ** 2
        mix += rng.normal(size=n) * math.sqrt(power / 10 ** (snr_db / 10))
    return Waveform(np.clip(mix, -1.0, 1.0))


def simulate(cfg: DialogueConfig, recording: str = "rec") -> tuple[Waveform, GroundTruth]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_frames = num_frames(int(round(cfg.duration_s * SAMPLE_RATE)))
    activity = schedule(cfg, rng, n_frames)
    wav = render(activity, cfg.duration_s, rng, cfg.noise_snr_db)
    speakers = [f"{recording}_spk{c}" for c in range(2)]
    gt = GroundTruth(activity, activity_to_segments(activity, recording, speakers),
                     cfg.duration_s, recording, speakers)
    return wav, gt


def simulate_features(cfg: DialogueConfig, recording: str = "rec", spread: float = 0.3):
    """Feature-space shortcut: Gaussian speaker clusters, summed where speakers overlap.

    Skips audio and the front end entirely; returns ``(features, GroundTruth)``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_frames = int(round(cfg.duration_s / FRAME_S))
    activity = schedule(cfg, rng, n_frames)
    centers = rng.normal(size=(2, FEATURE_DIM))
    feats = activity.T.astype(np.float64) @ centers + spread * rng.normal(size=(n_frames, FEATURE_DIM))
    speakers = [f"{recording}_spk{c}" for c in range(2)]
    gt = GroundTruth(activity, activity_to_segments(activity, recording, speakers),
                     cfg.duration_s, recording, speakers)
    return feats, gt


# -- datasets ---------------------------------------------------------------------

@dataclass
class ManifestEntry:
    recording: str
    audio: Path
    rttm: Path
    duration_s: float


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e.recording}\t{e.audio}\t{e.rttm}\t{e.duration_s:.2f}\n")


def read_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise SimulationError(f"{path}:{lineno}: expected 4 tab-separated fields")
        rec, audio, rttm, dur = fields
        entries.append(ManifestEntry(rec, base / audio, base / rttm, float(dur)))
    return entries


def dataset_stats(truths: list[GroundTruth]) -> tuple[int, float, float]:
    """(number of files, total hours, overlap percent over speech time)."""
    if not truths:
        raise SimulationError("empty manifest")
    hours = sum(gt.duration_s for gt in truths) / 3600.0
    counts = [np.asarray(gt.activity).sum(axis=0) for gt in truths]
    speech = sum(np.count_nonzero(c >= 1) for c in counts)
    overlap = sum(np.count_nonzero(c >= 2) for c in counts)
    return len(truths), hours, 100.0 * overlap / speech if speech else 0.0


def format_stats(name: str, stats: tuple[int, float, float]) -> str:
    n, hours, ovl = stats
    header = f"{'set':<10}{'files':>8}{'hours':>10}{'overlap(%)':>13}"
    return f"{header}\n{name:<10}{n:>8d}{hours:>10.2f}{ovl:>13.2f}"


def generate_dataset(out_dir, n_files: int, base: DialogueConfig) -> tuple[list[ManifestEntry], list[GroundTruth]]:
    """Write wav + rttm per dialogue and a manifest; seeds are base.seed + index."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "rttm").mkdir(parents=True, exist_ok=True)
    entries, truths = [], []
    for i in range(n_files):
        rec = f"dlg{i:04d}"
        cfg = DialogueConfig(**{**base.__dict__, "seed": base.seed + i})
        wav, gt = simulate(cfg, rec)
        write_wav(out / "wav" / f"{rec}.wav", wav)
        write_rttm(out / "rttm" / f"{rec}.rttm", gt.segments)
        entries.append(ManifestEntry(rec, Path("wav") / f"{rec}.wav", Path("rttm") / f"{rec}.rttm", cfg.duration_s))
        truths.append(gt)
    write_manifest(out / "manifest.tsv", entries)
    return entries, truths
