import json

import numpy as np
import pytest

from dmosapo.core.checkpoint import load_checkpoint, save_checkpoint
from dmosapo.core.exceptions import CheckpointFormatError
from dmosapo.models.policy import Critic, SquashedGaussianPolicy


def test_round_trip_preserves_arrays(tmp_path):
    params = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5]), "s": np.array(3.25)}
    save_checkpoint(tmp_path / "model", "test", params, {"n": 2}, {"note": "x"})
    header, loaded = load_checkpoint(tmp_path / "model", kind="test")
    assert header.architecture == {"n": 2}
    assert header.extra == {"note": "x"}
    for name, arr in params.items():
        np.testing.assert_array_equal(loaded[name], arr)


def test_blob_is_little_endian_float64(tmp_path):
    save_checkpoint(tmp_path / "model", "test", {"w": np.array([1.0, 2.0])})
    assert (tmp_path / "model.bin").read_bytes() == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_wrong_kind_and_missing_files(tmp_path):
    save_checkpoint(tmp_path / "model", "policy", {"w": np.zeros(2)})
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "model", kind="critic")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "absent")


def test_unsupported_schema_version(tmp_path):
    save_checkpoint(tmp_path / "model", "test", {"w": np.zeros(2)})
    header = json.loads((tmp_path / "model.json").read_text())
    header["schema_version"] = 42
    (tmp_path / "model.json").write_text(json.dumps(header))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "model")


def test_truncated_blob(tmp_path):
    save_checkpoint(tmp_path / "model", "test", {"w": np.zeros(4)})
    (tmp_path / "model.bin").write_bytes(np.zeros(2, dtype="<f8").tobytes())
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "model")


def test_policy_and_critic_reload_identically(tmp_path):
    policy = SquashedGaussianPolicy(5, 2, hidden=8, seed=3)
    critic = Critic(5, hidden=8, seed=4)
    policy.save(tmp_path / "policy")
    critic.save(tmp_path / "critic")
    features = np.random.default_rng(0).normal(size=(4, 5))
    np.testing.assert_array_equal(SquashedGaussianPolicy.load(tmp_path / "policy").mode(features),
                                  policy.mode(features))
    np.testing.assert_array_equal(Critic.load(tmp_path / "critic")(features).data, critic(features).data)
