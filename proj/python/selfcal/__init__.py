"""Python access to the selfcal library."""

from ._selfcal import (
    Model,
    analyze,
    build_calibration_set,
    compress,
    decode,
    encode,
    ngram_diversity,
    repetition_fraction,
    run_experiment,
    schedule_temperature,
    vocabulary_coverage,
    zipf_coefficient,
)

__all__ = [
    "Model",
    "analyze",
    "build_calibration_set",
    "compress",
    "decode",
    "encode",
    "ngram_diversity",
    "repetition_fraction",
    "run_experiment",
    "schedule_temperature",
    "vocabulary_coverage",
    "zipf_coefficient",
]
