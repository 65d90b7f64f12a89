import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eendvad import scoring as sc
from eendvad.scoring import RttmError, Segment


def frames_to_segments(rows, labels, rec="r", frame_s=0.1):
    segs = []
    for row, lab in zip(rows, labels):
        t = 0
        while t < len(row):
            if row[t]:
                s = t
                while t < len(row) and row[t]:
                    t += 1
                segs.append(Segment(rec, round(s * frame_s, 6), round((t - s) * frame_s, 6), lab))
            else:
                t += 1
    return segs


def frame_oracle(ref_rows, hyp_rows):
    """Per-frame counting DER with the best injective hyp->ref map, plain loops."""
    n_ref, n_hyp, n_t = len(ref_rows), len(hyp_rows), len(ref_rows[0])
    best_correct = 0
    for perm in itertools.permutations(list(range(n_ref)) + [None] * n_hyp, n_hyp):
        correct = sum(1 for h, r in enumerate(perm) if r is not None
                      for t in range(n_t) if ref_rows[r][t] and hyp_rows[h][t])
        best_correct = max(best_correct, correct)
    miss = fa = conf = speech = 0
    for t in range(n_t):
        nr = sum(r[t] for r in ref_rows)
        nh = sum(h[t] for h in hyp_rows)
        speech += nr
        miss += max(nr - nh, 0)
        fa += max(nh - nr, 0)
        conf += min(nr, nh)
    conf -= best_correct
    return (miss + fa + conf) / speech if speech else 0.0


def random_fixture(rng, n_t=60):
    n_ref, n_hyp = rng.integers(1, 4), rng.integers(0, 4)
    ref = (rng.random((n_ref, n_t)) < 0.4).astype(int)
    ref[0, rng.integers(n_t)] = 1
    hyp = (rng.random((n_hyp, n_t)) < 0.4).astype(int)
    return ref, hyp


def test_der_identity_and_empty_hyp():
    ref = [Segment("r", 0.0, 10.0, "A"), Segment("r", 12.0, 3.0, "B")]
    b = sc.der(ref, ref)
    assert (b.der, b.miss, b.fa, b.conf) == (0.0, 0.0, 0.0, 0.0)
    b = sc.der(ref, [])
    assert b.der == pytest.approx(1.0) and b.miss == pytest.approx(1.0)


def test_der_half_coverage_is_exactly_half():
    ref = [Segment("r", 0.0, 10.0, "A")]
    hyp = [Segment("r", 0.0, 5.0, "X")]
    b = sc.der(ref, hyp, collar=0.0)
    assert b.der == 0.5 and b.miss == 0.5 and b.fa == 0.0 and b.conf == 0.0


def test_der_matches_frame_oracle_on_random_fixtures():
    rng = np.random.default_rng(5)
    for _ in range(50):
        ref, hyp = random_fixture(rng)
        r = frames_to_segments(ref, ["a", "b", "c"])
        h = frames_to_segments(hyp, ["x", "y", "z"])
        assert sc.der(r, h, collar=0.0).der == pytest.approx(frame_oracle(ref, hyp), abs=1e-9)


def test_confusion_and_false_alarm():
    ref = [Segment("r", 0.0, 4.0, "A"), Segment("r", 4.0, 4.0, "B")]
    hyp = [Segment("r", 0.0, 8.0, "X"), Segment("r", 6.0, 2.0, "Y")]
    b = sc.der(ref, hyp, collar=0.0)
    # X -> A (4 s correct), Y -> B (2 s correct), X over B 4..6 is confusion, 6..8 double -> FA 2
    assert b.conf_s == pytest.approx(2.0) and b.fa_s == pytest.approx(2.0) and b.miss_s == 0.0
    assert b.der == pytest.approx(b.miss + b.fa + b.conf, abs=1e-15)


def test_collar_excludes_boundaries():
    ref = [Segment("r", 1.0, 2.0, "A")]
    hyp = [Segment("r", 1.2, 1.6, "X")]
    assert sc.der(ref, hyp, collar=0.0).der > 0
    assert sc.der(ref, hyp, collar=0.25).der == 0.0


def test_overlap_counts_per_speaker_and_can_be_skipped():
    ref = [Segment("r", 0.0, 2.0, "A"), Segment("r", 1.0, 2.0, "B")]
    b = sc.der(ref, [Segment("r", 0.0, 3.0, "X")], collar=0.0)
    assert b.t_speech == pytest.approx(4.0)
    assert b.miss_s == pytest.approx(1.0)
    b = sc.der(ref, [Segment("r", 0.0, 3.0, "X")], collar=0.0, skip_overlap=True)
    assert b.t_speech == pytest.approx(2.0)


def test_recording_mismatch_is_an_error():
    with pytest.raises(ValueError):
        sc.der([Segment("a", 0, 1, "A")], [Segment("b", 0, 1, "X")])


seg_lists = st.lists(
    st.tuples(st.integers(0, 80), st.integers(1, 30), st.sampled_from(["A", "B", "C"])),
    min_size=1, max_size=8)


def to_segments(items, rec="r"):
    return [Segment(rec, on / 10, d / 10, s) for on, d, s in items]


@settings(max_examples=40, deadline=None)
@given(seg_lists, seg_lists)
def test_der_properties(ref_items, hyp_items):
    ref, hyp = to_segments(ref_items), to_segments(hyp_items)
    assert sc.der(ref, ref).der == 0.0
    renamed = [s._replace(speaker="new_" + s.speaker) for s in hyp]
    assert sc.der(ref, hyp, 0.0).der == pytest.approx(sc.der(ref, renamed, 0.0).der, abs=1e-12)
    small = sc.der(ref, hyp, collar=0.1)
    big = sc.der(ref, hyp, collar=0.5)
    errors = lambda b: b.miss_s + b.fa_s + b.conf_s
    assert errors(big) <= errors(small) + 1e-9


def test_decode_examples():
    segs = sc.decode(np.full((1, 10), 0.9))
    assert segs == [Segment("rec", 0.0, 1.0, "spk0")]
    assert sc.decode(np.full((2, 10), 0.1)) == []
    # zero-padded median of [1, 0, 1]: edges see (0, 1, 0) -> 0, middle sees (1, 0, 1) -> 1
    segs = sc.decode(np.array([[0.9, 0.1, 0.9]]), median_window=3)
    assert segs == [Segment("rec", 0.1, 0.1, "spk0")]
    with pytest.raises(ValueError):
        sc.decode(np.zeros((1, 4)), median_window=4)


def test_rttm_parse_format_and_errors(tmp_path):
    line = "SPEAKER rec1 1 0.00 5.00 <NA> <NA> spkA <NA> <NA>"
    assert sc.parse_rttm_line(line) == Segment("rec1", 0.0, 5.0, "spkA")
    assert sc.format_rttm_line(Segment("rec1", 0.0, 5.0, "spkA")) == line
    bad = tmp_path / "bad.rttm"
    bad.write_text(line + "\nSPEAKER rec1 1 0.00 5.00 <NA> <NA> spkA <NA>\n")
    with pytest.raises(RttmError, match="line 2"):
        sc.read_rttm(bad)


@given(st.lists(st.tuples(st.text("abc", min_size=1, max_size=3),
                          st.floats(0, 1e4, allow_nan=False), st.floats(1e-3, 1e3),
                          st.text("xyz", min_size=1, max_size=3)), max_size=10))
def test_rttm_round_trip(items):
    import tempfile
    from pathlib import Path
    segs = sorted(Segment(*i) for i in items)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.rttm"
        sc.write_rttm(p, segs)
        back = sc.read_rttm(p)
    assert sorted(back) == segs


def test_report_layout():
    ref = [Segment("r1", 0.0, 10.0, "A")]
    total, rows = sc.der(ref, [Segment("r1", 0.0, 5.0, "X")], collar=0.0, per_recording=True)
    text = sc.format_report(rows, total)
    assert text.splitlines()[0].split() == ["recording", "DER", "Miss", "FA", "Conf.", "Speech(s)"]
    assert "ALL" in text
    machine = [l for l in text.splitlines() if l.startswith("DER\t")]
    assert machine[-1].split("\t")[1:3] == ["ALL", "0.5"]
