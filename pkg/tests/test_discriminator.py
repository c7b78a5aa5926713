import numpy as np
import pytest
from hypothesis import given, strategies as st

from crfseg import tensor as T
from crfseg.discriminator import Discriminator, DiscriminatorConfig
from crfseg.tensor import Tensor


def make(base_exp=1, p=3, seed=0):
    return Discriminator(DiscriminatorConfig(num_labels=p, base_exp=base_exp), np.random.default_rng(seed))


def test_default_ladder():
    assert DiscriminatorConfig().channels == (128, 256, 512, 1024)
    assert DiscriminatorConfig(base_exp=5).channels == (64, 128, 256, 512)


def test_parameter_shapes_follow_ladder():
    d = make(base_exp=6)
    assert d.params["conv0.w"].shape == (128, 3, 3, 3)
    assert d.params["conv3.w"].shape == (1024, 512, 3, 3)
    assert d.params["fc.w"].shape == (1, 1024)


def test_spatial_sizes_96():
    assert make().spatial_sizes(96, 96) == [(48, 48), (24, 24), (12, 12), (6, 6)]


@given(st.integers(0, 1000), st.sampled_from(["train", "infer"]))
def test_output_in_open_unit_interval(seed, mode):
    rng = np.random.default_rng(seed)
    seg = rng.random((2, 3, 16, 16)) * rng.uniform(0, 50)
    out = make(seed=seed % 7)(Tensor(seg), mode=mode).data
    assert out.shape == (2,)
    assert np.all((out > 0) & (out < 1))


def test_zero_affine_gives_half():
    d = make()
    d.params["fc.w"] = Tensor(np.zeros((1, d.cfg.channels[-1])))
    d.params["fc.b"] = Tensor(np.zeros(1))
    out = d(Tensor(np.random.default_rng(1).random((3, 3, 32, 32))), mode="train").data
    assert np.all(out == 0.5)


def test_rejects_small_or_mislabelled_input():
    d = make()
    with pytest.raises(T.ShapeError):
        d(Tensor(np.zeros((2, 3, 15, 32))))
    with pytest.raises(T.ShapeError):
        d(Tensor(np.zeros((2, 2, 32, 32))))


def test_infer_mode_deterministic_and_leaves_stats():
    d = make()
    seg = Tensor(np.random.default_rng(2).random((2, 3, 16, 16)))
    d(seg, mode="train")
    before = {k: v.copy() for k, v in d.state_arrays().items()}
    a = d(seg, mode="infer").data
    b = d(seg, mode="infer").data
    assert np.array_equal(a, b)
    after = d.state_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_mode_updates_running_stats():
    d = make()
    before = d.running[0].mean.copy()
    d(Tensor(np.random.default_rng(3).random((2, 3, 16, 16)) + 1), mode="train")
    assert not np.array_equal(before, d.running[0].mean)


def test_state_round_trip():
    a, b = make(seed=0), make(seed=1)
    a(Tensor(np.random.default_rng(4).random((2, 3, 16, 16))), mode="train")
    b.load_arrays(a.state_arrays())
    seg = Tensor(np.random.default_rng(5).random((2, 3, 16, 16)))
    assert np.array_equal(a(seg, mode="infer").data, b(seg, mode="infer").data)
