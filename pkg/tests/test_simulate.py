import numpy as np
import pytest

from avdiar.annotation import annotation_to_matrix
from avdiar.config import toy_config
from avdiar.errors import DataError
from avdiar.simulate import (
    SourceCorpus,
    apply_lip_missing,
    lip_motion,
    make_corpus,
    overlap_ratio,
    simulate_lip_track,
    simulate_sample,
    simulate_speaker_utterance,
    slot_speaker_id,
)

CFG = toy_config()
THRESH = CFG.sim.lip_motion_threshold


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(CFG.sim, CFG.video, CFG.audio.sample_rate, seed=42, domain="train")


class TestUtterance:
    def test_deterministic(self, corpus):
        a1, s1 = simulate_speaker_utterance(corpus, "tr000", 10.0, np.random.default_rng(1))
        a2, s2 = simulate_speaker_utterance(corpus, "tr000", 10.0, np.random.default_rng(1))
        assert s1 == s2
        np.testing.assert_array_equal(a1.samples, a2.samples)

    def test_same_speaker_same_seed_identical_waveform(self, corpus):
        w1 = corpus.speech("tr003", 2.0, np.random.default_rng(5))
        w2 = corpus.speech("tr003", 2.0, np.random.default_rng(5))
        np.testing.assert_array_equal(w1, w2)

    def test_speakers_differ(self, corpus):
        w1 = corpus.speech("tr000", 2.0, np.random.default_rng(5))
        w2 = corpus.speech("tr001", 2.0, np.random.default_rng(5))
        assert not np.array_equal(w1, w2)

    def test_short_duration(self, corpus):
        audio, segs = simulate_speaker_utterance(corpus, "tr000", 0.48, np.random.default_rng(2))
        assert len(audio.samples) == int(0.48 * corpus.sample_rate)
        assert len(segs) <= 1

    def test_silence_is_exact_zero(self, corpus):
        audio, segs = simulate_speaker_utterance(corpus, "tr001", 12.0, np.random.default_rng(3))
        sr = corpus.sample_rate
        mask = np.ones(len(audio.samples), dtype=bool)
        for onset, duration in segs:
            a, b = int(round(onset * sr)), int(round((onset + duration) * sr))
            mask[a:b] = False
        assert np.all(audio.samples[mask] == 0.0)

    def test_mean_segment_length(self, corpus):
        rng = np.random.default_rng(7)
        lengths = []
        for _ in range(150):
            _, segs = simulate_speaker_utterance(corpus, "tr002", 60.0, rng)
            lengths.extend(d for _, d in segs if d < 60.0)
        assert len(lengths) > 1000
        assert 1.8 <= np.mean(lengths) <= 2.2

    def test_segments_quantized_to_video_frames(self, corpus):
        _, segs = simulate_speaker_utterance(corpus, "tr004", 10.0, np.random.default_rng(9))
        q = 1.0 / corpus.fps
        for onset, duration in segs:
            assert abs(onset / q - round(onset / q)) < 1e-6
            assert abs(duration / q - round(duration / q)) < 1e-6


class TestLipTrack:
    def test_all_silence_is_static(self, corpus):
        track = simulate_lip_track(corpus, [], 4.0, np.random.default_rng(1))
        assert track.num_frames == int(4.0 * corpus.fps)
        assert np.all(lip_motion(track.frames) < THRESH)

    def test_all_speech_is_moving(self, corpus):
        track = simulate_lip_track(corpus, [(0.0, 4.0)], 4.0, np.random.default_rng(1))
        assert np.all(lip_motion(track.frames) > THRESH)

    def test_mixed_agrees_with_segments(self, corpus):
        rng = np.random.default_rng(11)
        agreements = []
        for _ in range(10):
            _, segs = simulate_speaker_utterance(corpus, "tr005", 8.0, rng)
            track = simulate_lip_track(corpus, segs, 8.0, rng)
            active = lip_motion(track.frames) > THRESH
            want = np.zeros(track.num_frames, dtype=bool)
            for onset, duration in segs:
                a = int(round(onset * corpus.fps))
                b = int(round((onset + duration) * corpus.fps))
                want[a:b] = True
            agreements.append(np.mean(active == want))
        assert np.mean(agreements) >= 0.95


class TestSample:
    def test_single_speaker_mixture_is_source(self, corpus):
        sample, sources = simulate_sample(
            corpus, 1, 8.0, np.random.default_rng(3), return_sources=True
        )
        np.testing.assert_array_equal(sample.audio.samples, sources[0].samples)

    def test_mixture_is_mean_of_sources(self, corpus):
        for n in (2, 3, 4):
            sample, sources = simulate_sample(
                corpus, n, 8.0, np.random.default_rng(n), return_sources=True
            )
            stack = np.stack([s.samples for s in sources])
            np.testing.assert_array_equal(sample.audio.samples, stack.mean(axis=0))
            np.testing.assert_allclose(
                sample.audio.samples * n, stack.sum(axis=0), rtol=0, atol=1e-15
            )

    def test_determinism(self, corpus):
        s1 = simulate_sample(corpus, 3, 8.0, np.random.default_rng(21))
        s2 = simulate_sample(corpus, 3, 8.0, np.random.default_rng(21))
        np.testing.assert_array_equal(s1.audio.samples, s2.audio.samples)
        for t1, t2 in zip(s1.lip_tracks, s2.lip_tracks):
            np.testing.assert_array_equal(t1.frames, t2.frames)
        assert s1.annotation.segments == s2.annotation.segments

    def test_audio_visual_sync(self, corpus):
        rng = np.random.default_rng(31)
        agreements = []
        for k in range(8):
            sample = simulate_sample(corpus, int(rng.integers(1, 5)), 8.0, rng)
            mat = annotation_to_matrix(
                sample.annotation,
                [slot_speaker_id(i) for i in range(sample.num_speakers)],
                1.0 / corpus.fps,
                0.0,
                8.0,
            )
            for i, track in enumerate(sample.lip_tracks):
                active = lip_motion(track.frames) > THRESH
                agreements.append(np.mean(active == (mat.values[i] > 0.5)))
        assert np.mean(agreements) >= 0.95

    def test_overlap_statistic(self, corpus):
        rng = np.random.default_rng(99)
        ratios = [
            simulate_sample(corpus, int(rng.integers(2, 5)), 8.0, rng).overlap_ratio
            for _ in range(200)
        ]
        assert 0.20 <= np.mean(ratios) <= 0.40

    def test_noise_domain(self):
        noisy = make_corpus(CFG.sim, CFG.video, CFG.audio.sample_rate, seed=1, domain="test")
        sample = simulate_sample(noisy, 2, 8.0, np.random.default_rng(0), noise_snr_db=20.0)
        # noise everywhere: no exact-zero samples remain
        assert np.count_nonzero(sample.audio.samples) == len(sample.audio.samples)


@pytest.fixture(scope="module")
def sample(corpus):
    return simulate_sample(corpus, 3, 8.0, np.random.default_rng(55))


class TestLipMissing:
    @pytest.mark.parametrize("scenario", ["partial", "complete", "hybrid"])
    def test_zero_rate_unchanged(self, sample, scenario):
        out = apply_lip_missing(sample, scenario, 0.0, np.random.default_rng(1))
        for a, b in zip(out.lip_tracks, sample.lip_tracks):
            np.testing.assert_array_equal(a.frames, b.frames)
            assert a.valid_mask.all()

    def test_complete_full_rate(self, sample):
        out = apply_lip_missing(sample, "complete", 1.0, np.random.default_rng(1))
        for track in out.lip_tracks:
            assert not track.valid_mask.any()
            assert np.all(track.frames == 0)

    def test_partial_half_rate_frame_count(self, sample):
        out = apply_lip_missing(sample, "partial", 0.5, np.random.default_rng(2))
        for track in out.lip_tracks:
            n = track.num_frames
            invalid = int((~track.valid_mask).sum())
            assert invalid in (n // 2, n - n // 2)
            # contiguous window
            idx = np.flatnonzero(~track.valid_mask)
            assert idx[-1] - idx[0] + 1 == len(idx)

    def test_annotation_untouched(self, sample):
        out = apply_lip_missing(sample, "hybrid", 0.7, np.random.default_rng(3))
        assert out.annotation.segments == sample.annotation.segments

    def test_bad_scenario(self, sample):
        with pytest.raises(DataError):
            apply_lip_missing(sample, "sometimes", 0.5, np.random.default_rng(0))


def test_overlap_ratio_disjoint():
    from avdiar.annotation import DiarizationAnnotation, Segment

    ann = DiarizationAnnotation(
        "r", [Segment("spk0", 0.0, 1.0), Segment("spk1", 2.0, 1.0)]
    )
    assert overlap_ratio(ann, 12.5, 4.0) == 0.0


def test_domain_inventories_disjoint():
    tr = make_corpus(CFG.sim, CFG.video, 16000, seed=4, domain="train")
    te = make_corpus(CFG.sim, CFG.video, 16000, seed=4, domain="test")
    assert not set(tr.speaker_ids) & set(te.speaker_ids)
