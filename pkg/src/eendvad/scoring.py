"""Posterior decoding, RTTM I/O and diarization error rate with a collar.

DER follows the md-eval convention: scoring runs on a 10 ms grid, time within
``collar`` seconds of any reference boundary is not scored, overlapped speech
counts once per active reference speaker, and hypothesis speakers are mapped
to reference speakers by the one-to-one assignment with maximal overlap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.signal import medfilt

RESOLUTION_S = 0.01
MODEL_FRAME_S = 0.1


class RttmError(ValueError):
    pass


class Segment(NamedTuple):
    recording: str
    onset: float
    duration: float
    speaker: str

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class DerBreakdown:
    miss_s: float
    fa_s: float
    conf_s: float
    t_speech: float

    @property
    def miss(self) -> float:
        return self.miss_s / self.t_speech if self.t_speech else 0.0

    @property
    def fa(self) -> float:
        return self.fa_s / self.t_speech if self.t_speech else 0.0

    @property
    def conf(self) -> float:
        return self.conf_s / self.t_speech if self.t_speech else 0.0

    @property
    def der(self) -> float:
        if not self.t_speech:
            return 0.0 if self.miss_s + self.fa_s + self.conf_s == 0 else math.inf
        return (self.miss_s + self.fa_s + self.conf_s) / self.t_speech

    def __add__(self, other: DerBreakdown) -> DerBreakdown:
        return DerBreakdown(self.miss_s + other.miss_s, self.fa_s + other.fa_s,
                            self.conf_s + other.conf_s, self.t_speech + other.t_speech)


# -- RTTM -------------------------------------------------------------------------

def _fmt_time(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="k", min_digits=2)


def format_rttm_line(seg: Segment) -> str:
    return (f"SPEAKER {seg.recording} 1 {_fmt_time(seg.onset)} {_fmt_time(seg.duration)} "
            f"<NA> <NA> {seg.speaker} <NA> <NA>")


def parse_rttm_line(line: str, lineno: int = 0) -> Segment:
    fields = line.split()
    if len(fields) != 10:
        raise RttmError(f"line {lineno}: expected 10 fields, got {len(fields)}")
    if fields[0] != "SPEAKER":
        raise RttmError(f"line {lineno}: unsupported record type {fields[0]!r}")
    try:
        onset, duration = float(fields[3]), float(fields[4])
    except ValueError:
        raise RttmError(f"line {lineno}: onset/duration are not numbers") from None
    if duration <= 0 or onset < 0:
        raise RttmError(f"line {lineno}: need onset >= 0 and duration > 0")
    return Segment(fields[1], onset, duration, fields[7])


def read_rttm(path) -> list[Segment]:
    segs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip() and not line.lstrip().startswith("#"):
            segs.append(parse_rttm_line(line, lineno))
    return segs


def write_rttm(path, segments) -> None:
    with open(path, "w") as f:
        for seg in sorted(segments, key=lambda s: (s.recording, s.onset, s.speaker)):
            f.write(format_rttm_line(seg) + "\n")


# -- decoding -----------------------------------------------------------------------

def decode(posteriors: np.ndarray, recording: str = "rec", threshold: float = 0.5,
           median_window: int | None = None, speakers=None,
           frame_s: float = MODEL_FRAME_S) -> list[Segment]:
    """Threshold (strictly above), optionally median-filter, and merge runs."""
    y = np.asarray(posteriors, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] < 1:
        raise ValueError(f"posteriors must be C x T with T >= 1, got {y.shape}")
    if median_window is not None and median_window % 2 == 0:
        raise ValueError("median window must be odd")
    speakers = speakers or [f"spk{c}" for c in range(y.shape[0])]
    segs = []
    for c, row in enumerate(y):
        active = (row > threshold).astype(np.float64)
        if median_window and median_window > 1:
            # zero padding at the edges: ends of the recording lean inactive
            active = medfilt(active, median_window)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], active.astype(int), [0]])))
        for on, off in zip(edges[::2], edges[1::2]):
            segs.append(Segment(recording, round(on * frame_s, 6), round((off - on) * frame_s, 6), speakers[c]))
    return sorted(segs, key=lambda s: (s.onset, s.speaker))


# -- DER ------------------------------------------------------------------------------

def _to_ticks(t: float) -> int:
    return int(round(t / RESOLUTION_S))


def _rasterize(segments, n: int) -> tuple[list[str], np.ndarray]:
    labels = sorted({s.speaker for s in segments})
    index = {s: i for i, s in enumerate(labels)}
    grid = np.zeros((len(labels), n), dtype=bool)
    for s in segments:
        grid[index[s.speaker], _to_ticks(s.onset):_to_ticks(s.end)] = True
    return labels, grid


def optimal_mapping(overlap: np.ndarray) -> dict[int, int]:
    """Hypothesis -> reference index map maximizing summed overlap.

    Exhaustive over assignments; fine for the handful of speakers per
    recording seen here. Ties resolve to the first assignment enumerated.
    """
    n_ref, n_hyp = overlap.shape
    best, best_val = {}, -1.0
    if n_ref == 0 or n_hyp == 0:
        return best
    k = min(n_ref, n_hyp)
    for refs in itertools.permutations(range(n_ref), k):
        for hyps in itertools.combinations(range(n_hyp), k):
            val = sum(overlap[r, h] for r, h in zip(refs, hyps))
            if val > best_val:
                best, best_val = dict(zip(hyps, refs)), val
    return best


def der_recording(ref, hyp, collar: float = 0.25, skip_overlap: bool = False) -> DerBreakdown:
    """DER components (in seconds) for one recording."""
    end = max([s.end for s in list(ref) + list(hyp)], default=0.0)
    n = _to_ticks(end) + 1
    ref_labels, R = _rasterize(ref, n)
    _, H = _rasterize(hyp, n)

    scored = np.ones(n, dtype=bool)
    if collar > 0:
        c = _to_ticks(collar)
        for s in ref:
            for b in (_to_ticks(s.onset), _to_ticks(s.end)):
                scored[max(b - c, 0):b + c] = False
    if skip_overlap:
        scored &= R.sum(axis=0) < 2
    R, H = R[:, scored], H[:, scored]

    overlap = R.astype(np.int64) @ H.T.astype(np.int64)
    mapping = optimal_mapping(overlap)
    n_ref, n_hyp = R.sum(axis=0), H.sum(axis=0)
    correct = np.zeros(R.shape[1], dtype=np.int64)
    for h, r in mapping.items():
        correct += R[r] & H[h]
    miss = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    return DerBreakdown(miss * RESOLUTION_S, fa * RESOLUTION_S, conf * RESOLUTION_S,
                        n_ref.sum() * RESOLUTION_S)


def group_by_recording(segments) -> dict[str, list[Segment]]:
    out: dict[str, list[Segment]] = {}
    for s in segments:
        out.setdefault(s.recording, []).append(s)
    return out


def der(ref, hyp, collar: float = 0.25, skip_overlap: bool = False,
        per_recording: bool = False):
    """Aggregate DER over recordings; optionally also the per-recording rows."""
    refs, hyps = group_by_recording(ref), group_by_recording(hyp)
    extra = set(hyps) - set(refs)
    if extra:
        raise ValueError(f"hypothesis has recordings missing from reference: {sorted(extra)}")
    rows = {rec: der_recording(refs[rec], hyps.get(rec, []), collar, skip_overlap)
            for rec in sorted(refs)}
    total = sum(rows.values(), DerBreakdown(0.0, 0.0, 0.0, 0.0))
    return (total, rows) if per_recording else total


def format_report(rows: dict[str, DerBreakdown], total: DerBreakdown) -> str:
    """Aligned table (percent) followed by machine-readable ``DER\\t...`` lines."""
    lines = [f"{'recording':<20}{'DER':>8}{'Miss':>8}{'FA':>8}{'Conf.':>8}{'Speech(s)':>11}"]
    items = list(rows.items()) + [("ALL", total)]
    for rec, b in items:
        lines.append(f"{rec:<20}{100 * b.der:>8.2f}{100 * b.miss:>8.2f}{100 * b.fa:>8.2f}"
                     f"{100 * b.conf:>8.2f}{b.t_speech:>11.2f}")
    lines.append("")
    for rec, b in items:
        vals = (b.der, b.miss, b.fa, b.conf, b.t_speech)
        lines.append("\t".join(["DER", rec] + [repr(float(v)) for v in vals]))
    return "\n".join(lines)
