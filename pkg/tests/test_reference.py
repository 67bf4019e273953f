import numpy as np

from sgem import acoustic, corpus, reference


def test_shipped_assets_match_the_recipe():
    shifted = reference.shifted_corpus()
    clean = reference.clean_corpus()
    assert len(shifted.entries) == reference.SHIFTED_UTTERANCES
    assert len(clean.entries) == reference.CLEAN_UTTERANCES
    model = reference.load_model()
    assert model.hparams["feature_dim"] == reference.EMISSION.feature_dim
    assert reference.load_lm(model.vocab).order == reference.LM_ORDER


def test_shifted_corpus_is_reproducible_from_seeds():
    model = reference.load_model()
    shipped = reference.shifted_corpus().utterances()[:3]
    test = corpus.generate_utterances(model.vocab, 3, reference.LENGTH_RANGE, reference.EMISSION,
                                      seed=reference.SHIFTED_SEED, prefix="sh")
    again = corpus.apply_shift(test, reference.SHIFT, reference.SNR_DB, seed=reference.SHIFTED_SEED,
                               vocab=model.vocab, emission=reference.EMISSION)
    for a, b in zip(shipped, again):
        assert a.reference == b.reference
        np.testing.assert_allclose(a.features, b.features, rtol=1e-6, atol=1e-5)


def test_build_writes_loadable_assets(tmp_path, monkeypatch):
    monkeypatch.setattr(reference, "CLEAN_UTTERANCES", 4)
    monkeypatch.setattr(reference, "SHIFTED_UTTERANCES", 4)
    summary = reference.build(tmp_path, train_utterances=8, epochs=1)
    assert {"train_seconds", "final_loss", "clean_wer", "shifted_wer"} <= summary.keys()
    assert isinstance(reference.load_model(tmp_path), acoustic.FrameModel)
    assert len(reference.shifted_corpus(tmp_path).entries) == 4
