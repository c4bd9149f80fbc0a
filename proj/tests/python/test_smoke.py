import csv
import io

import numpy as np
import pytest

import dysmm


def test_tokenize_round_trip():
    assert dysmm.normalize_word("Mother-In-Law") == "motherinlaw"
    assert dysmm.tokenize("one") == [14, 13, 4]
    assert dysmm.detokenize(dysmm.tokenize("zulu")) == "zulu"
    with pytest.raises(dysmm.Error):
        dysmm.tokenize("123")


def test_mel_scale_and_filterbank():
    assert dysmm.hz_to_mel(1000.0) == pytest.approx(999.99, abs=0.01)
    fb = dysmm.mel_filterbank()
    assert fb.shape == (80, 257)
    assert (fb >= 0).all() and (fb.max(axis=1) > 0).all()


def test_logmel_matches_frame_count():
    t = np.arange(16000) / 16000.0
    mel = dysmm.logmel(0.5 * np.sin(2 * np.pi * 440 * t))
    assert mel.shape == (98, 80)
    assert np.isfinite(mel).all()
    # 440 Hz energy dominates the low bands.
    assert mel.mean(axis=0).argmax() < 20


def test_bayes_oracle_agrees_with_numpy_posterior():
    rng = np.random.default_rng(0)
    p = rng.random((3, 4, 2))
    p /= p.sum()
    agree, cells = dysmm.bayes_oracle_check(p)
    assert agree
    for s, t, post, lik, fac in cells:
        assert post == lik == fac == int(np.argmax(p[s, t]))


def test_parameter_counts():
    assert dysmm.expected_parameter_count() == 315745
    assert dysmm.expected_parameter_count("severity") == 315745 + 99


def test_layout_and_splits():
    text = dysmm.ua_speech_layout_csv()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len({r["speaker_id"] for r in rows}) == 26
    assert len({r["word_id"] for r in rows}) == 455
    plan = dysmm.build_split(text, "SID-2", 3)
    assert len(plan["folds"]) == 26
    assert not plan["violations"]
    assert not set(plan["train_uncommon"]) & set(plan["test_uncommon"])
    sev = dysmm.build_split(text, "SEVERITY")
    assert len(sev["folds"]) == 1


def test_config_errors_name_key():
    assert len(dysmm.config_digest("train.lr = 0.001\n")) == 16
    assert dysmm.config_digest("") != dysmm.config_digest("train.lr = 0.001\n")
    assert "train.lr" in dysmm.config_keys()
    with pytest.raises(dysmm.ConfigError, match="model.width"):
        dysmm.config_digest("model.width = 3\n")


def test_synthetic_corpus(tmp_path):
    n = dysmm.generate_synthetic_corpus("detection-xor", tmp_path, seed=1, speakers=2, repetitions=1)
    assert n == 80
    wav = next((tmp_path / "wav").rglob("*.wav"))
    assert dysmm.load_wav(wav).shape == (8000,)


def test_quick_verify_suites():
    for suite in ("dsp", "bayes", "splits", "control"):
        ok, lines = dysmm.verify(suite)
        assert ok, lines
    with pytest.raises(dysmm.ConfigError):
        dysmm.verify("synth")
