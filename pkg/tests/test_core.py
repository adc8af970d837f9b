import dataclasses

import numpy as np
import pytest

from dectrack.core import (
    ConfigError,
    DimensionMismatch,
    Identity,
    RunConfig,
    TorsoKeypoints,
    config_from_mapping,
    config_to_mapping,
    derive_rng,
    load_run_config,
    validate_config,
)

from helpers import FACING_AWAY, det


def test_default_config_validates_to_itself():
    cfg = RunConfig()
    assert validate_config(cfg) is cfg


@pytest.mark.parametrize("change, name, message", [
    ({"L": 0}, "L", "L must be ≥ 1"),
    ({"beta": -1.0}, "beta", "beta must be > 0"),
    ({"gamma": 0.0}, "gamma", "gamma must be > 0"),
    ({"n_p": 0}, "n_p", "n_p must be ≥ 1"),
    ({"resample_ess_frac": 1.5}, "resample_ess_frac", "resample_ess_frac must be in (0, 1]"),
    ({"bin_mode": "fancy"}, "bin_mode", "bin_mode must be one of uniform, kmeans"),
    ({"use_position": False, "use_appearance": False}, "use_position",
     "at least one of use_position, use_appearance must be true"),
])
def test_invalid_fields_are_named(change, name, message):
    with pytest.raises(ConfigError) as err:
        validate_config(RunConfig().replace(**change))
    assert err.value.name == name
    assert str(err.value) == message


def test_first_violation_wins():
    with pytest.raises(ConfigError) as err:
        validate_config(RunConfig(L=0, beta=-1))
    assert err.value.name == "L"


def test_config_mapping_round_trip(tmp_path):
    cfg = RunConfig(L=4, beta=2.5, init_var=(1, 2, 3, 4, 5, 6))
    path = tmp_path / "run.yaml"
    import yaml

    path.write_text(yaml.safe_dump(config_to_mapping(cfg)))
    assert load_run_config(path) == cfg


def test_every_config_key_is_a_field():
    names = {f.name for f in dataclasses.fields(RunConfig)}
    assert set(config_to_mapping(RunConfig())) == names
    with pytest.raises(ConfigError, match="unknown config key: bogus"):
        config_from_mapping({"bogus": 1})


def test_detection_validation():
    with pytest.raises(DimensionMismatch):
        det(0, (0, 0, 10, 10), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="width and height"):
        det(0, (0, 0, 0, 10), np.zeros(2))
    with pytest.raises(ValueError, match="frame"):
        det(-1, (0, 0, 1, 1), np.zeros(2))
    bad = TorsoKeypoints.from_flat([0, 0, 1.5] + [0, 0, 1] * 3)
    with pytest.raises(ValueError, match="confidence"):
        det(0, (0, 0, 1, 1), np.zeros(2), keypoints=bad)


def test_detection_is_immutable_and_measures_centre():
    d = det(3, (10, 20, 4, 8), [1.0, 2.0])
    with pytest.raises(ValueError):
        d.embedding[0] = 5.0
    assert d.measurement.tolist() == [12.0, 24.0, 4.0, 8.0]
    assert d == det(3, (10, 20, 4, 8), [1.0, 2.0])
    assert d != det(3, (10, 20, 4, 8), [1.0, 2.5])


def test_keypoint_flat_round_trip():
    assert TorsoKeypoints.from_flat(FACING_AWAY.flat()) == FACING_AWAY
    with pytest.raises(ValueError):
        TorsoKeypoints.from_flat([1, 2, 3])


def test_identity_packing_orders_like_pairs():
    ids = [Identity(2, 5), Identity(1, 999), Identity(1, 3), Identity(3, 0)]
    assert sorted(ids, key=lambda i: i.packed) == sorted(ids)
    assert Identity(1, 3).packed == 1_000_003
    assert Identity(1, 3, global_id=7) == Identity(1, 3)


def test_derived_streams_are_reproducible_and_distinct():
    a = derive_rng(7, "tracker", 1).random(4)
    assert np.array_equal(a, derive_rng(7, "tracker", 1).random(4))
    assert not np.array_equal(a, derive_rng(7, "tracker", 2).random(4))
    assert not np.array_equal(a, derive_rng(7, "scenario", 1).random(4))
    assert not np.array_equal(a, derive_rng(8, "tracker", 1).random(4))
