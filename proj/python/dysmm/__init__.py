"""Speech and text cross-attention for dysarthria assessment (C++ core)."""

from ._core import (
    ConfigError,
    Error,
    bayes_oracle_check,
    build_split,
    config_digest,
    config_keys,
    detokenize,
    expected_parameter_count,
    generate_synthetic_corpus,
    hz_to_mel,
    load_wav,
    logmel,
    mel_filterbank,
    mel_to_hz,
    normalize_word,
    tokenize,
    ua_speech_layout_csv,
    verify,
)

__all__ = [name for name in dir() if not name.startswith("_")]
