import numpy as np
import pytest

from avdiar.errors import DataError, NumericalError
from avdiar.media import (
    AudioSignal,
    FaceLandmarks,
    LipTrack,
    compute_lip_roi,
    list_lip_tracks,
    load_lip_track,
    save_lip_track,
)


class TestLipRoi:
    def test_hand_case_wide_mouth(self):
        roi = compute_lip_roi(FaceLandmarks((2, 3), (0, 0), (4, 0)))
        assert roi.x_center == pytest.approx(2.0, abs=1e-9)
        assert roi.y_center == pytest.approx(0.0, abs=1e-9)
        # d_mn = 3, d_corners = 4 -> min(9.6, 8) = 8
        assert roi.width == pytest.approx(8.0, abs=1e-9)
        assert roi.height == roi.width

    def test_hand_case_narrow(self):
        roi = compute_lip_roi(FaceLandmarks((0, 1), (-1, 0), (1, 0)))
        assert (roi.x_center, roi.y_center) == (0.0, 0.0)
        # d_mn = 1, d_corners = 2 -> min(3.2, 4) = 3.2
        assert roi.width == pytest.approx(3.2, abs=1e-9)

    def test_translation_equivariance(self):
        base = FaceLandmarks((2, 3), (0, 0), (4, 0))
        moved = FaceLandmarks((12, 13), (10, 10), (14, 10))
        a, b = compute_lip_roi(base), compute_lip_roi(moved)
        assert b.width == pytest.approx(a.width, abs=1e-9)
        assert (b.x_center - a.x_center, b.y_center - a.y_center) == (10.0, 10.0)

    def test_rotation_and_scale_equivariance(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            pts = rng.normal(size=(3, 2)) * 10
            base = compute_lip_roi(FaceLandmarks(tuple(pts[0]), tuple(pts[1]), tuple(pts[2])))
            theta = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            rpts = pts @ rot.T
            rotated = compute_lip_roi(FaceLandmarks(tuple(rpts[0]), tuple(rpts[1]), tuple(rpts[2])))
            assert rotated.width == pytest.approx(base.width, rel=1e-9)
            center = np.array([base.x_center, base.y_center]) @ rot.T
            assert rotated.x_center == pytest.approx(center[0], abs=1e-9)
            assert rotated.y_center == pytest.approx(center[1], abs=1e-9)
            s = rng.uniform(0.1, 5.0)
            spts = pts * s
            scaled = compute_lip_roi(FaceLandmarks(tuple(spts[0]), tuple(spts[1]), tuple(spts[2])))
            assert scaled.width == pytest.approx(s * base.width, rel=1e-9)

    def test_degenerate_landmarks(self):
        with pytest.raises(NumericalError):
            compute_lip_roi(FaceLandmarks((1, 1), (1, 1), (1, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            FaceLandmarks((np.nan, 0), (0, 0), (1, 0))


class TestLipTrack:
    def test_invalid_frames_must_be_zero(self):
        frames = np.ones((4, 8, 8), dtype=np.float32) * 0.5
        mask = np.array([True, False, True, True])
        with pytest.raises(DataError):
            LipTrack(frames, 12.5, mask)

    def test_mask_frames(self):
        frames = np.ones((10, 8, 8), dtype=np.float32) * 0.5
        track = LipTrack(frames, 12.5, np.ones(10, dtype=bool))
        masked = track.mask_frames(2, 5)
        assert not masked.valid_mask[2:5].any()
        assert np.all(masked.frames[2:5] == 0)
        assert np.all(masked.frames[5:] == 0.5)
        assert track.valid_mask.all()  # original untouched

    def test_container_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        frames = rng.random((13, 8, 8)).astype(np.float32)
        frames[4:6] = 0.0
        mask = np.ones(13, dtype=bool)
        mask[4:6] = False
        track = LipTrack(frames, 12.5, mask)
        save_lip_track(track, tmp_path, "recA", "spk1")
        back = load_lip_track(tmp_path, "recA", "spk1")
        np.testing.assert_array_equal(back.frames, track.frames)
        np.testing.assert_array_equal(back.valid_mask, track.valid_mask)
        assert back.fps == 12.5
        assert list_lip_tracks(tmp_path, "recA") == ["spk1"]

    def test_container_bad_magic(self, tmp_path):
        d = tmp_path / "recB"
        d.mkdir()
        (d / "x.lips").write_bytes(b"JUNKxxxxxxxxxxxxxxxx")
        (d / "x.json").write_text('{"fps": 10, "valid_mask": []}')
        with pytest.raises(DataError, match="magic"):
            load_lip_track(tmp_path, "recB", "x")

    def test_slice_frames_pads_with_invalid(self):
        frames = np.full((5, 4, 4), 0.3, dtype=np.float32)
        track = LipTrack(frames, 12.5, np.ones(5, dtype=bool))
        cut = track.slice_frames(3, 4)
        assert cut.num_frames == 4
        assert cut.valid_mask.tolist() == [True, True, False, False]
        assert np.all(cut.frames[2:] == 0)


class TestAudioSignal:
    def test_duration_and_slice(self):
        sig = AudioSignal(np.arange(16000, dtype=float), 16000)
        assert sig.duration == 1.0
        cut = sig.slice(0.5, 1.0)
        assert len(cut.samples) == 16000
        assert cut.samples[0] == 8000
        assert np.all(cut.samples[8000:] == 0)  # padded past the end

    def test_bad_rate(self):
        with pytest.raises(DataError):
            AudioSignal(np.zeros(10), 0)
