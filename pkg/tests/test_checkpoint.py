import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uaspk.checkpoint import checkpoint_average, load_arrays, save_arrays
from uaspk.model import ModelConfig, SpeakerModel
from uaspk.numkit import RandomStream


def test_roundtrip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": torch.tensor([1.5, -2.0], dtype=torch.float64),
              "s": np.array(3.25)}
    stem = save_arrays(tmp_path / "ck.json", arrays, {"epoch": 4})
    back, meta = load_arrays(stem)
    assert list(back) == ["w", "b", "s"] and meta == {"epoch": 4}
    assert np.array_equal(back["w"], arrays["w"]) and back["s"].shape == ()
    manifest = json.loads((tmp_path / "ck.json").read_text())
    assert manifest["arrays"][1] == {"name": "b", "shape": [2], "offset": 6}
    assert (tmp_path / "ck.bin").stat().st_size == 9 * 8


def test_bad_format_and_truncation(tmp_path):
    save_arrays(tmp_path / "a", {"x": np.ones(4)})
    with open(tmp_path / "a.bin", "r+b") as fh:
        fh.truncate(16)
    with pytest.raises(ValueError, match="truncated"):
        load_arrays(tmp_path / "a")
    (tmp_path / "a.json").write_text('{"format": "other", "arrays": []}')
    with pytest.raises(ValueError, match="unsupported"):
        load_arrays(tmp_path / "a")


def test_average_examples():
    x = {"a": np.array([1.0, -2.0, 3.5]), "b": np.array([[0.1]])}
    same = checkpoint_average([x, x, x])
    assert all(np.array_equal(same[k], x[k]) for k in x)
    zero = {k: np.zeros_like(v) for k, v in x.items()}
    twice = {k: 2 * v for k, v in x.items()}
    mid = checkpoint_average([zero, twice])
    assert all(np.array_equal(mid[k], x[k]) for k in x)
    three = checkpoint_average([{"a": np.array([1.0, 2.0])}, {"a": np.array([4.0, 0.0])}, {"a": np.array([7.0, 1.0])}])
    assert three["a"].tolist() == [4.0, 1.0]


def test_average_errors():
    with pytest.raises(ValueError):
        checkpoint_average([])
    with pytest.raises(ValueError, match="shape mismatch"):
        checkpoint_average([{"a": np.ones(2)}, {"a": np.ones(3)}])
    with pytest.raises(ValueError, match="names"):
        checkpoint_average([{"a": np.ones(2)}, {"b": np.ones(2)}])


@given(st.integers(0, 10 ** 6), st.integers(1, 6))
@settings(max_examples=40)
def test_average_is_mean(seed, k):
    cks = [{"p": RandomStream(seed, (i,)).normal(size=5)} for i in range(k)]
    np.testing.assert_allclose(checkpoint_average(cks)["p"], np.mean([c["p"] for c in cks], axis=0), rtol=1e-13, atol=1e-15)


def test_model_save_load(tmp_path):
    m = SpeakerModel(ModelConfig(n_classes=3), seed=2)
    m.save(tmp_path / "m", {"note": "x"})
    back, meta = SpeakerModel.load(tmp_path / "m")
    assert meta["note"] == "x" and back.cfg == m.cfg
    for (n, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
