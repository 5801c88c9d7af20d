import json

import numpy as np
import pytest
from oracles import icd_direct, ipd_direct, mcs_direct, wrap

from spatialsep import features as feat
from spatialsep import signal as sig
from spatialsep.autodiff import Tensor
from spatialsep.errors import ConfigError, DataError


def test_pair_indices_reference_examples():
    assert feat.pair_indices(feat.PairSpec(3, 1, 6)) == [(1, 4), (2, 5), (3, 6)]
    assert feat.pair_indices(feat.PairSpec(1, 2, 6)) == [(1, 2), (3, 4), (5, 6)]
    assert feat.all_pairs([feat.PairSpec(3, 1, 6), feat.PairSpec(1, 2, 6)]) == [
        (1, 4), (2, 5), (3, 6), (1, 2), (3, 4), (5, 6)]
    assert feat.pair_indices(feat.PairSpec(1, 1, 2)) == [(1, 2)]


def test_pair_indices_errors():
    with pytest.raises(ConfigError, match=r"\(3, 7\)"):
        feat.pair_indices(feat.PairSpec(4, 1, 6, count=3))
    with pytest.raises(ConfigError):
        feat.pair_indices(feat.PairSpec(6, 1, 6))
    with pytest.raises(ConfigError):
        feat.pair_indices(feat.PairSpec(0, 1, 6))


def test_pair_spec_roundtrip():
    spec = feat.PairSpec(3, 1, 6, count=2)
    assert feat.PairSpec.from_dict(spec.to_dict()) == spec
    assert spec.pairs == [(1, 4), (2, 5)]


def test_mcs_matches_direct_sum():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((2, 120))
    bank = feat.McsFilterBank(4, 2, 40, rng)
    out = feat.compute_mcs(y, bank).value[0]
    np.testing.assert_allclose(out, mcs_direct(y, bank.K.value, 20), atol=1e-12)


def test_mcs_single_channel_unit_filter_is_framing():
    bank = feat.McsFilterBank(1, 1, 4)
    bank.K.value = np.zeros((1, 1, 4))
    bank.K.value[0, 0, 0] = 1.0
    x = np.arange(12.0)[None]
    np.testing.assert_array_equal(feat.compute_mcs(x, bank, hop=2).value[0, 0], x[0, 0:9:2])


def test_mcs_channel_mismatch():
    bank = feat.McsFilterBank(2, 6, 40)
    with pytest.raises(DataError):
        feat.compute_mcs(np.zeros((3, 100)), bank)


@pytest.mark.parametrize("mode", feat.W2_MODES)
def test_icd_matches_direct_sum(mode):
    rng = np.random.default_rng(1)
    y = rng.standard_normal((6, 140))
    bank = feat.IcdFilterBank(5, 40, mode, rng)
    specs = [feat.PairSpec(3, 1, 6), feat.PairSpec(1, 2, 6)]
    out = feat.compute_icd(y, bank, specs, hop=20).value[0]
    ref = icd_direct(y, bank.K.value, bank.w1, bank.w2.value, feat.all_pairs(specs), 20)
    assert out.shape == (6, 5, 6)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_icd_fixed_w2_is_channel_difference_and_antisymmetric():
    rng = np.random.default_rng(2)
    y = rng.standard_normal((2, 100))
    bank = feat.IcdFilterBank(3, 40, "fix -1", rng)
    spec = feat.PairSpec(1, 1, 2)
    out = feat.compute_icd(y, bank, [spec], hop=20).value[0, 0]
    for n in range(3):
        np.testing.assert_allclose(out[n], sig.conv1d(y[0] - y[1], bank.K.value[n], stride=20), atol=1e-12)
    swapped = feat.compute_icd(y[::-1], bank, [spec], hop=20).value[0, 0]
    np.testing.assert_array_equal(swapped, -out)


def test_icd_w2_modes():
    rng = np.random.default_rng(3)
    fixed = feat.IcdFilterBank(2, 8, "fix -1", rng)
    assert not fixed.w2.trainable
    np.testing.assert_array_equal(fixed.w2.value, -1)
    init = feat.IcdFilterBank(2, 8, "init. -1", rng)
    assert init.w2.trainable
    np.testing.assert_array_equal(init.w2.value, -1)
    rand = feat.IcdFilterBank(2, 8, "init. randomly", rng)
    assert rand.w2.trainable and np.all(np.abs(rand.w2.value) <= 1) and np.ptp(rand.w2.value) > 0
    with pytest.raises(ConfigError):
        feat.IcdFilterBank(2, 8, "per-filter")


def test_icd_identical_channels_with_fixed_w2_vanish():
    y = np.tile(np.random.default_rng(4).standard_normal(80), (6, 1))
    bank = feat.IcdFilterBank(4, 40, "fix -1")
    out = feat.compute_icd(y, bank, [feat.PairSpec(3, 1, 6)], hop=20).value
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_ipd_matches_direct_dft_and_unit_circle():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((6, 200))
    pairs = feat.all_pairs([feat.PairSpec(3, 1, 6), feat.PairSpec(1, 2, 6)])
    cos_ipd, sin_ipd = feat.compute_ipd(y, pairs)
    ref_cos, ref_sin = ipd_direct(y, pairs, 40, 20, 64)
    assert cos_ipd.shape == (6, 33, 9)
    np.testing.assert_allclose(cos_ipd, ref_cos, atol=1e-8)
    np.testing.assert_allclose(sin_ipd, ref_sin, atol=1e-8)
    np.testing.assert_allclose(cos_ipd ** 2 + sin_ipd ** 2, 1.0, atol=1e-10)


def test_ipd_gain_invariance_and_silence():
    rng = np.random.default_rng(6)
    y = rng.standard_normal((2, 120))
    c1, s1 = feat.compute_ipd(y, [(1, 2)])
    c2, s2 = feat.compute_ipd(3.7 * y, [(1, 2)])
    np.testing.assert_allclose(c1, c2, atol=1e-10)
    np.testing.assert_allclose(s1, s2, atol=1e-10)
    c0, s0 = feat.compute_ipd(np.zeros((2, 80)), [(1, 2)])
    np.testing.assert_array_equal(c0, 1.0)
    np.testing.assert_array_equal(s0, 0.0)


@pytest.mark.parametrize("k,tau", [(8, 1), (16, 3), (24, 2), (8, 5)])
def test_ipd_pure_tone_delay(k, tau):
    n = np.arange(400)
    y = np.stack([np.cos(2 * np.pi * k * n / 64), np.cos(2 * np.pi * k * (n - tau) / 64)])
    cos_ipd, sin_ipd = feat.compute_ipd(y, [(1, 2)])
    measured = np.arctan2(sin_ipd[0, k], cos_ipd[0, k])
    expected = wrap(2 * np.pi * k * tau / 64)
    np.testing.assert_allclose(wrap(measured - expected), 0.0, atol=1e-6)


def test_assemble_features_layout_and_truncation():
    a = Tensor(np.ones((1, 3, 10)))
    b = Tensor(np.zeros((1, 2, 4, 9)))
    stacked = feat.assemble_features([("a", a), ("b", b)])
    assert stacked.values.shape == (1, 11, 9)
    assert stacked.layout == [("a", 0, 3), ("b", 3, 11)]
    np.testing.assert_array_equal(stacked.block("a"), 1.0)


def test_sort_filters_by_peak_bin_tones():
    length, n_fft = 40, 64
    t = np.arange(length)
    bins = [20, 3, 11, 0, 30]
    filters = np.stack([np.cos(2 * np.pi * b * t / n_fft) * np.hanning(length) for b in bins])
    order, mags = feat.sort_filters_by_peak_bin(filters, n_fft)
    assert mags.shape == (5, 33)
    assert list(order) == list(np.argsort(bins))
    assert list(np.argmax(mags, axis=1)) == bins


def test_sort_filters_multichannel_and_ties():
    filters = np.zeros((3, 2, 40))
    order, mags = feat.sort_filters_by_peak_bin(filters)
    assert list(order) == [0, 1, 2]
    assert mags.shape == (3, 33)


def test_feature_dump_roundtrip(tmp_path):
    values = Tensor(np.random.default_rng(7).standard_normal((1, 5, 4)))
    stacked = feat.assemble_features([("x", values)])
    prefix = tmp_path / "dump"
    bin_path, json_path = feat.write_feature_dump(prefix, stacked, {"pairs": [[1, 4]]})
    back, meta = feat.read_feature_dump(prefix)
    np.testing.assert_array_equal(back, values.value)
    assert json.loads(open(json_path).read())["blocks"][0]["name"] == "x"
    assert meta["pairs"] == [[1, 4]]
