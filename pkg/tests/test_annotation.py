import numpy as np
import pytest

from avdiar.annotation import (
    DiarizationAnnotation,
    Segment,
    VoiceActivityMatrix,
    annotation_to_matrix,
    matrix_to_annotation,
    read_rttm,
    write_rttm,
)
from avdiar.errors import DataError

from oracles import frame_matrix_bruteforce


def random_annotation(rng, n_speakers=3, max_time=60.0, rec="rec0", quantum=0.001, min_gap=0.0):
    segments = []
    for i in range(n_speakers):
        t = 0.0
        while t < max_time - 0.5:
            gap = rng.uniform(min_gap, 3.0)
            dur = rng.uniform(0.05, 4.0)
            onset = round((t + gap) / quantum) * quantum
            dur = max(quantum, round(dur / quantum) * quantum)
            if onset + dur > max_time:
                break
            segments.append(Segment(f"spk{i}", onset, dur))
            t = onset + dur
    return DiarizationAnnotation(rec, segments)


class TestRttm:
    def test_single_line(self, tmp_path):
        p = tmp_path / "a.rttm"
        p.write_text("SPEAKER rec1 1 0.50 2.00 <NA> <NA> alice <NA> <NA>\n")
        anns = read_rttm(p)
        assert len(anns) == 1
        assert anns[0].recording_id == "rec1"
        assert anns[0].segments == [Segment("alice", 0.5, 2.0)]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.rttm"
        p.write_text("")
        assert read_rttm(p) == []

    def test_negative_duration_rejected(self, tmp_path):
        p = tmp_path / "bad.rttm"
        p.write_text("SPEAKER rec1 1 0.50 -1.0 <NA> <NA> alice <NA> <NA>\n")
        with pytest.raises(DataError, match="bad.rttm:1"):
            read_rttm(p)

    def test_short_line_rejected(self, tmp_path):
        p = tmp_path / "short.rttm"
        p.write_text("SPEAKER rec1 1 0.50\n")
        with pytest.raises(DataError, match="fields"):
            read_rttm(p)

    def test_non_speaker_lines_skipped(self, tmp_path):
        p = tmp_path / "mixed.rttm"
        p.write_text(
            ";; comment\n"
            "SPKR-INFO rec1 1 <NA> <NA> <NA> unknown alice <NA> <NA>\n"
            "SPEAKER rec1 1 1.00 1.00 <NA> <NA> bob <NA> <NA>\n"
        )
        anns = read_rttm(p)
        assert [s.speaker_id for s in anns[0].segments] == ["bob"]

    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(7)
        for k in range(100):
            ann = random_annotation(rng, n_speakers=int(rng.integers(1, 5)), rec=f"r{k}")
            if not ann.segments:
                continue
            p = tmp_path / "rt.rttm"
            write_rttm([ann], p)
            back = read_rttm(p)[0]
            assert back.recording_id == ann.recording_id
            a, b = ann.sorted_segments(), back.sorted_segments()
            assert len(a) == len(b)
            for sa, sb in zip(a, b):
                assert sa.speaker_id == sb.speaker_id
                assert abs(sa.onset - sb.onset) <= 0.0005 + 1e-12
                assert abs(sa.duration - sb.duration) <= 0.0005 + 1e-12

    def test_three_decimals(self, tmp_path):
        ann = DiarizationAnnotation("rec", [Segment("a", 1.23456, 0.98765)])
        p = tmp_path / "r.rttm"
        write_rttm([ann], p)
        line = [l for l in p.read_text().splitlines() if l.startswith("SPEAKER")][0]
        assert " 1.235 " in line and " 0.988 " in line
        back = read_rttm(p)[0].segments[0]
        assert abs(back.onset - 1.23456) < 1e-3

    def test_empty_annotation_writes_no_speaker_lines(self, tmp_path):
        p = tmp_path / "e.rttm"
        write_rttm([DiarizationAnnotation("rec", [])], p, header="config_hash=deadbeef")
        assert all(not l.startswith("SPEAKER") for l in p.read_text().splitlines())
        assert read_rttm(p) == []


class TestMatrix:
    def test_basic_rasterization(self):
        ann = DiarizationAnnotation("r", [Segment("alice", 0.0, 0.05)])
        mat = annotation_to_matrix(ann, ["alice"], 0.01, 0.0, 0.1)
        assert mat.values.tolist() == [[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]]

    def test_overlapped_speakers_multilabel(self):
        ann = DiarizationAnnotation(
            "r", [Segment("a", 0.0, 1.0), Segment("b", 0.0, 1.0)]
        )
        mat = annotation_to_matrix(ann, ["a", "b"], 0.1, 0.0, 1.0)
        assert mat.values.shape == (2, 10)
        assert np.all(mat.values == 1.0)

    def test_unknown_speaker_zero_row(self):
        ann = DiarizationAnnotation("r", [Segment("a", 0.0, 1.0)])
        mat = annotation_to_matrix(ann, ["a", "ghost"], 0.1, 0.0, 1.0)
        assert np.all(mat.values[1] == 0)

    def test_epsilon_overlap_activates_frame(self):
        # 1 ms into frame 3 of a 10 ms grid
        ann = DiarizationAnnotation("r", [Segment("a", 0.039, 0.001)])
        mat = annotation_to_matrix(ann, ["a"], 0.01, 0.0, 0.1)
        assert mat.values[0].tolist() == [0, 0, 0, 1, 0, 0, 0, 0, 0, 0]

    @pytest.mark.parametrize("resolution", [0.01, 0.04, 0.08])
    def test_matches_bruteforce(self, resolution):
        rng = np.random.default_rng(int(resolution * 1000))
        for _ in range(20):
            n_spk = int(rng.integers(1, 7))
            ann = random_annotation(rng, n_speakers=n_spk, max_time=60.0)
            order = [f"spk{i}" for i in range(n_spk)]
            chunk = 56.0
            got = annotation_to_matrix(ann, order, resolution, 0.0, chunk)
            want = frame_matrix_bruteforce(ann, order, resolution, 0.0, chunk)
            np.testing.assert_array_equal(got.values, want)

    def test_start_offset(self):
        ann = DiarizationAnnotation("r", [Segment("a", 1.0, 0.5)])
        mat = annotation_to_matrix(ann, ["a"], 0.1, 0.8, 1.0)
        assert mat.values[0].tolist() == [0, 0, 1, 1, 1, 1, 1, 0, 0, 0]


class TestMatrixToAnnotation:
    def test_runs(self):
        mat = VoiceActivityMatrix(np.array([[0, 1, 1, 0, 1.0]]), 0.01, ["a"])
        ann = matrix_to_annotation(mat, 0.5)
        assert ann.segments == [Segment("a", 0.01, 0.02), Segment("a", 0.04, 0.01)]

    def test_all_zero(self):
        mat = VoiceActivityMatrix(np.zeros((2, 10)), 0.01, ["a", "b"])
        assert matrix_to_annotation(mat, 0.5).segments == []

    def test_roundtrip_on_aligned_boundaries(self):
        rng = np.random.default_rng(3)
        res = 0.04
        for _ in range(30):
            n_spk = int(rng.integers(1, 4))
            ann = random_annotation(rng, n_speakers=n_spk, max_time=20.0, quantum=res, min_gap=2 * res)
            order = sorted({s.speaker_id for s in ann.segments})
            if not order:
                continue
            mat = annotation_to_matrix(ann, order, res, 0.0, 20.0)
            back = matrix_to_annotation(mat, 0.5)
            assert back.sorted_segments() == ann.sorted_segments()

    def test_threshold_validated(self):
        mat = VoiceActivityMatrix(np.zeros((1, 5)), 0.01, ["a"])
        with pytest.raises(DataError):
            matrix_to_annotation(mat, 1.5)
