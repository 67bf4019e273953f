import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from sgem import corpus
from sgem.core import Vocabulary

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=0, max_size=8)


class TestWER:
    def test_substitution_example(self):
        assert corpus.wer("a b c", "a x c") == 1 / 3

    def test_insertion_heavy_exceeds_one(self):
        assert corpus.wer("a", "a b c d") == 3.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError, match="empty reference"):
            corpus.wer("", "a")

    @settings(max_examples=200, deadline=None)
    @given(ref=words.filter(bool), hyp=words)
    def test_matches_recursive_oracle(self, ref, hyp):
        assert corpus.wer(" ".join(ref), " ".join(hyp)) == oracles.levenshtein(ref, hyp) / len(ref)

    @settings(max_examples=100, deadline=None)
    @given(a=words, b=words, c=words)
    def test_edit_distance_is_a_metric(self, a, b, c):
        d = corpus.edit_distance
        assert d(a, a) == 0
        assert d(a, b) == d(b, a)
        assert d(a, c) <= d(a, b) + d(b, c)

    def test_transcript_wer_splits_at_delimiter(self):
        assert corpus.transcript_wer("ab|cd", "ab|ce") == 0.5

    def test_corpus_wer_pools_counts(self):
        pairs = [("a|b", "a|b"), ("c", "d|e")]
        assert corpus.corpus_error_counts(pairs) == (2, 3)
        assert corpus.corpus_wer(pairs) == pytest.approx(2 / 3)

    def test_cer(self):
        assert corpus.cer("abc", "abd") == pytest.approx(1 / 3)


class TestSNR:
    @pytest.mark.parametrize("snr", [0.0, 10.0, 20.0])
    def test_requested_snr_is_met(self, snr, rng):
        for _ in range(20):
            signal = rng.standard_normal((int(rng.integers(5, 200)), 16)) * rng.uniform(0.1, 10)
            noise = rng.standard_normal((64, 16))
            mixed = corpus.mix_at_snr(signal, noise, snr)
            assert abs(corpus.measured_snr(signal, mixed) - snr) < 0.01

    @pytest.mark.parametrize("k", range(len(corpus.NOISE_TEXTURES)))
    def test_every_texture_after_float32_storage(self, k, clean_utterances, vocab):
        shifted = corpus.apply_shift(clean_utterances[:4], f"texture:{k}", 10.0, seed=1, vocab=vocab)
        for clean, noisy in zip(clean_utterances, shifted):
            assert abs(corpus.measured_snr(clean.features, noisy.features) - 10.0) < 0.01

    def test_noise_is_tiled_to_signal_length(self, rng):
        signal = rng.standard_normal((150, 4)) + 1
        noise = rng.standard_normal((7, 4))
        mixed = corpus.mix_at_snr(signal, noise, 5.0)
        d = mixed - signal
        np.testing.assert_allclose(d[7:14], d[:7])

    def test_zero_power_and_shape_errors(self):
        with pytest.raises(ValueError):
            corpus.mix_at_snr(np.ones((3, 2)), np.zeros((3, 2)), 10)
        with pytest.raises(ValueError):
            corpus.mix_at_snr(np.zeros((3, 2)), np.ones((3, 2)), 10)
        with pytest.raises(ValueError):
            corpus.mix_at_snr(np.ones((3, 2)), np.ones((3, 3)), 10)


class TestShift:
    def test_parse(self):
        assert corpus.parse_shift("none") == ("none", None)
        assert corpus.parse_shift("texture:3") == ("texture", 3)
        for bad in ("texture:99", "pink", "texture:-1"):
            with pytest.raises(ValueError):
                corpus.parse_shift(bad)

    def test_none_is_identity_and_shift_is_deterministic(self, clean_utterances, vocab):
        assert corpus.apply_shift(clean_utterances, "none", 10.0) == list(clean_utterances)
        a = corpus.apply_shift(clean_utterances[:3], "texture:0", 10.0, seed=4, vocab=vocab)
        b = corpus.apply_shift(clean_utterances[:3], "texture:0", 10.0, seed=4, vocab=vocab)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)
            assert x.reference == y.reference

    def test_textures_have_fixed_shape(self):
        for name in corpus.NOISE_TEXTURES:
            tex = corpus.noise_texture(name, 16)
            assert tex.shape == (corpus.TEXTURE_FRAMES, 16) and np.isfinite(tex).all()
            np.testing.assert_array_equal(tex, corpus.noise_texture(name, 16))


class TestGeneration:
    def test_references_and_frames(self, vocab):
        params = corpus.EmissionParams()
        utts = corpus.generate_utterances(vocab, 30, (3, 10), params, seed=2)
        lo, hi = params.frames_per_token
        for u in utts:
            ids = vocab.encode(u.reference)
            assert 1 <= len(ids) <= 10
            assert not u.reference.startswith("|") and not u.reference.endswith("|")
            assert "||" not in u.reference
            assert all(a != b for a, b in zip(ids, ids[1:]))
            assert lo * len(ids) <= u.frames <= hi * len(ids)

    def test_class_means_are_equidistant(self, vocab):
        params = corpus.EmissionParams()
        means = params.class_means(vocab)
        letters = means[1:]
        d = np.linalg.norm(letters[:, None] - letters[None], axis=-1)
        off = d[~np.eye(len(letters), dtype=bool)]
        np.testing.assert_allclose(off, params.separation * params.sigma_clean, rtol=1e-12)
        np.testing.assert_array_equal(means[vocab.blank_index], 0.0)

    def test_seeded(self, vocab):
        a = corpus.generate_utterances(vocab, 3, seed=8)
        b = corpus.generate_utterances(vocab, 3, seed=8)
        assert [u.reference for u in a] == [u.reference for u in b]
        np.testing.assert_array_equal(a[2].features, b[2].features)

    def test_length_range_checked(self, vocab):
        with pytest.raises(ValueError):
            corpus.generate_utterances(vocab, 1, (0, 3))


class TestFiles:
    def test_feature_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((11, 5)).astype(np.float32)
        corpus.write_features(tmp_path / "x.f", x)
        np.testing.assert_array_equal(corpus.read_features(tmp_path / "x.f"), x)
        (tmp_path / "bad.f").write_bytes(b"nope")
        with pytest.raises(ValueError):
            corpus.read_features(tmp_path / "bad.f")
        raw = (tmp_path / "x.f").read_bytes()
        (tmp_path / "cut.f").write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="payload"):
            corpus.read_features(tmp_path / "cut.f")

    def test_corpus_round_trip(self, tmp_path, vocab):
        m = corpus.make_synthetic_corpus(vocab, 5, (3, 6), seed=1, out_dir=tmp_path / "c",
                                         shift="texture:2", snr_db=10.0)
        back = corpus.read_manifest(tmp_path / "c" / "manifest.jsonl")
        assert [e.id for e in back] == [e.id for e in m]
        for e, u in zip(back, back.utterances()):
            assert u.frames == e.frames and u.reference == e.reference

    def test_missing_feature_file(self, tmp_path, vocab):
        corpus.make_synthetic_corpus(vocab, 2, (3, 4), seed=1, out_dir=tmp_path / "c")
        next((tmp_path / "c").glob("**/*.f*")).unlink()
        with pytest.raises((ValueError, OSError)):
            corpus.read_manifest(tmp_path / "c" / "manifest.jsonl")


class TestBuckets:
    def test_partition_matches_oracle(self, rng):
        entries = [corpus.ManifestEntry(f"u{i}", "x", "a", int(f)) for i, f in enumerate(rng.integers(1, 100, 60))]
        m = corpus.CorpusManifest(entries)
        edges = [20, 40, 75]
        buckets = corpus.bucket_by_length(m, edges)
        bounds = [-np.inf] + edges + [np.inf]
        for b, lo, hi in zip(buckets, bounds, bounds[1:]):
            assert [e.id for e in b] == [e.id for e in entries if lo <= e.frames < hi]
        assert sum(len(b) for b in buckets) == len(entries)
        assert corpus.bucket_labels(edges) == ["[-inf,20)", "[20,40)", "[40,75)", "[75,inf)"]

    def test_edges_must_increase(self):
        with pytest.raises(ValueError):
            corpus.bucket_by_length(corpus.CorpusManifest(), [3, 3])
