import json
import math
import os
from pathlib import Path

import pytest

import selfcal

DATA = Path(os.environ.get("SELFCAL_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))


def test_tokenizer_round_trip():
    ids = selfcal.encode("héllo")
    assert all(i < 256 for i in ids)
    assert selfcal.decode(ids + [256, 257]) == "héllo"


def test_schedule_values():
    assert selfcal.schedule_temperature(5, 0.5, 1.5, 10) == pytest.approx(1.0)
    assert selfcal.schedule_temperature(50, 0.5, 1.5, 10) == 1.5


def test_metrics_hand_cases():
    assert selfcal.repetition_fraction([[1, 2, 1]]) == pytest.approx(1 / 3)
    assert selfcal.ngram_diversity([[1, 1, 1, 1]]) == pytest.approx(25 / 48)
    assert selfcal.vocabulary_coverage([[0, 1, 2]]) == pytest.approx(3 / 259)


def test_calibration_is_seeded():
    model = selfcal.Model.random(seed=3)
    a = selfcal.build_calibration_set("self", 2, 40, seed=9, model=model)
    b = selfcal.build_calibration_set("self", 2, 40, seed=9, model=model)
    assert a == b
    assert [len(x) for x in a] == [40, 40]
    r = selfcal.build_calibration_set("random_vocab", 3, 10, seed=1)
    assert all(0 <= t < 256 for x in r for t in x)


def test_bad_arguments_raise():
    with pytest.raises(ValueError):
        selfcal.build_calibration_set("self", 2, 40)  # no model
    with pytest.raises(ValueError):
        selfcal.build_calibration_set("nonsense", 2, 40)


def test_compress_and_evaluate(tmp_path):
    model = selfcal.Model.random(layers=1, dim=16, heads=2, context=32, seed=1)
    calib = selfcal.build_calibration_set("random_vocab", 4, 32, seed=2)
    pruned, report = selfcal.compress(model, calib, "wanda")
    assert json.loads(report)["method"] == "wanda"
    ev = pruned.evaluate(calib)
    assert math.isfinite(ev["ppl"]) and ev["targets"] > 0
    path = tmp_path / "m.tlm"
    pruned.save(path)
    assert selfcal.Model.load(path).evaluate(calib) == ev


@pytest.mark.skipif(not (DATA / "tiny_lm.tlm").exists(), reason="bundled model not built")
def test_bundled_model_loads():
    model = selfcal.Model.load(DATA / "tiny_lm.tlm")
    assert model.parameter_count == 462720
    report = json.loads(selfcal.analyze(model, selfcal.build_calibration_set("random_vocab", 2, 64, seed=0)))
    assert report["coverage"] > 0
