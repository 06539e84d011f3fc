import math

import numpy as np
import pytest

from vista.config import VistaConfig
from vista.errors import ShapeError
from vista.isig import (
    binary_entropy_map,
    build_lowfreq_mask,
    entropy_mask,
    generate_views,
    lfccs_swap,
    sample_pair,
    ugps_swap,
)
from vista.volume import BinaryMask3D, MultiSequenceVolume


@pytest.fixture
def vol():
    rng = np.random.default_rng(0)
    return MultiSequenceVolume(rng.normal(size=(4, 16, 12, 10)).astype(np.float32))


# -- frequency mask -----------------------------------------------------------


def test_mask_zero_ratio_is_dc_only():
    for shape in [(16, 16, 16), (9, 10, 11)]:
        m = build_lowfreq_mask(shape, 0.0)
        assert m.count == 1
        assert m.data[tuple(n // 2 for n in shape)] == 1


def test_mask_full_ratio_covers_everything():
    m = build_lowfreq_mask((16, 16, 16), 1.0)
    assert m.half_widths == (8, 8, 8)
    assert m.count == 16**3


def test_mask_full_resolution_geometry():
    m = build_lowfreq_mask((160, 192, 160), 0.10)
    assert m.half_widths == (8, 9, 8)
    assert m.count == 17 * 19 * 17 == 5491


@pytest.mark.parametrize("shape,r", [((16, 16, 16), 0.3), ((15, 21, 9), 0.25), ((32, 24, 40), 0.1)])
def test_mask_is_centered_box(shape, r):
    m = build_lowfreq_mask(shape, r)
    assert m.count == math.prod(2 * h + 1 for h in m.half_widths)
    idx = np.argwhere(m.data)
    for axis, n in enumerate(shape):
        # symmetric about the fftshift center in every axis
        assert idx[:, axis].min() + idx[:, axis].max() == 2 * (n // 2)


def test_mask_rejects_bad_ratio():
    with pytest.raises(ValueError):
        build_lowfreq_mask((8, 8, 8), 1.5)


# -- LFCCS --------------------------------------------------------------------


def test_lfccs_self_swap_identity(vol):
    data = np.array(vol.data)
    data[1] = data[0]
    v = MultiSequenceVolume(data)
    out = lfccs_swap(v, (0, 1), 0.3)
    np.testing.assert_allclose(out.data[0], v.data[0], atol=1e-4)
    np.testing.assert_allclose(out.data[1], v.data[1], atol=1e-4)


def test_lfccs_leaves_other_sequences_bitwise(vol):
    out = lfccs_swap(vol, (1, 3), 0.2)
    assert np.array_equal(out.data[0], vol.data[0])
    assert np.array_equal(out.data[2], vol.data[2])


def test_lfccs_zero_ratio_only_moves_the_mean(vol):
    out = lfccs_swap(vol, (0, 2), 0.0)
    for s in (0, 2):
        for g_out, g_in in zip(np.gradient(out.data[s].astype(np.float64)), np.gradient(vol.data[s].astype(np.float64))):
            np.testing.assert_allclose(g_out, g_in, atol=1e-4)
    # the DC magnitude is exchanged
    assert abs(abs(out.data[0].sum()) - abs(vol.data[2].astype(np.float64).sum())) < 1e-2


def test_lfccs_full_ratio_exchanges_amplitude(vol):
    out = lfccs_swap(vol, (0, 1), 1.0)
    got = np.abs(np.fft.fftn(out.data[0].astype(np.float64)))
    want = np.abs(np.fft.fftn(vol.data[1].astype(np.float64)))
    assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-3


@pytest.mark.parametrize("r", [0.1, 0.3, 1.0])
def test_lfccs_preserves_phase(vol, r):
    out = lfccs_swap(vol, (0, 3), r)
    for s in (0, 3):
        f_out = np.fft.fftn(out.data[s].astype(np.float64))
        f_in = np.fft.fftn(vol.data[s].astype(np.float64))
        sel = np.abs(f_out) > 1e-6
        dphi = np.angle(f_out[sel] * np.conj(f_in[sel]))
        assert np.abs(dphi).max() <= 1e-3


def test_lfccs_parseval(vol):
    r = 0.25
    out = lfccs_swap(vol, (0, 1), r)
    mask = np.fft.ifftshift(build_lowfreq_mask(vol.spatial_shape, r).data.astype(bool))
    amp_a = np.abs(np.fft.fftn(vol.data[0].astype(np.float64)))
    amp_b = np.abs(np.fft.fftn(vol.data[1].astype(np.float64)))
    mixed = np.where(mask, amp_b, amp_a)
    energy = (out.data[0].astype(np.float64) ** 2).sum()
    expected = (mixed**2).sum() / mixed.size
    assert abs(energy - expected) / expected <= 1e-3


def test_lfccs_invalid_pair(vol):
    with pytest.raises(IndexError):
        lfccs_swap(vol, (1, 1), 0.1)
    with pytest.raises(IndexError):
        lfccs_swap(vol, (0, 4), 0.1)


# -- entropy ------------------------------------------------------------------


def test_entropy_max_at_half():
    U = binary_entropy_map(np.full((3, 4, 4, 4), 0.5))
    np.testing.assert_allclose(U, math.log(2), atol=1e-12)


def test_entropy_zero_for_certain_predictions():
    p = (np.random.default_rng(0).random((3, 4, 4, 4)) > 0.5).astype(float)
    assert binary_entropy_map(p).max() <= 2e-6


def test_entropy_channel_average():
    p = np.zeros((2, 1, 1, 1))
    p[:, 0, 0, 0] = (0.5, 1.0)
    assert binary_entropy_map(p)[0, 0, 0] == pytest.approx(math.log(2) / 2, abs=1e-6)


def test_entropy_mask_constant_map_saturates():
    m = entropy_mask(np.full((6, 6, 6), 0.3), 0.95, 1)
    assert m.count == 216


def test_entropy_mask_ramp_fraction():
    U = np.arange(8000, dtype=float).reshape(20, 20, 20)
    m = entropy_mask(U, 0.95, 1)
    assert abs(m.count / 8000 - 0.05) <= 1 / 8000


def test_entropy_mask_single_seed_dilation():
    U = np.zeros((9, 9, 9))
    U[4, 4, 4] = 1.0
    # 0.999 of 729 voxels interpolates above zero, so only the seed survives
    m = entropy_mask(U, 0.999, 3)
    assert m.count == 27
    assert m.data[3:6, 3:6, 3:6].all()


def test_entropy_mask_zero_padding_at_border():
    U = np.zeros((9, 9, 9))
    U[0, 0, 0] = 1.0
    assert entropy_mask(U, 0.999, 3).count == 8


def test_entropy_mask_rejects_bad_quantile():
    with pytest.raises(ValueError):
        entropy_mask(np.zeros((4, 4, 4)), 1.0, 3)


# -- UGPS ---------------------------------------------------------------------


def test_ugps_empty_mask_identity(vol):
    out = ugps_swap(vol, (0, 1), BinaryMask3D(np.zeros(vol.spatial_shape)))
    assert np.array_equal(out.data, vol.data)


def test_ugps_full_mask_exchanges(vol):
    out = ugps_swap(vol, (0, 2), BinaryMask3D(np.ones(vol.spatial_shape)))
    assert np.array_equal(out.data[0], vol.data[2])
    assert np.array_equal(out.data[2], vol.data[0])
    assert np.array_equal(out.data[1], vol.data[1])
    assert np.array_equal(out.data[3], vol.data[3])


def test_ugps_random_mask_voxelwise(vol):
    M = (np.random.default_rng(5).random(vol.spatial_shape) > 0.6).astype(np.uint8)
    out = ugps_swap(vol, (1, 3), M)
    on, off = M == 1, M == 0
    assert np.array_equal(out.data[1][on], vol.data[3][on])
    assert np.array_equal(out.data[1][off], vol.data[1][off])
    assert np.array_equal(out.data[3][on], vol.data[1][on])
    assert np.array_equal(out.data[3][off], vol.data[3][off])


def test_ugps_involution(vol):
    M = (np.random.default_rng(6).random(vol.spatial_shape) > 0.5).astype(np.uint8)
    twice = ugps_swap(ugps_swap(vol, (0, 3), M), (0, 3), M)
    assert np.array_equal(twice.data, vol.data)


def test_ugps_shape_error(vol):
    with pytest.raises(ShapeError):
        ugps_swap(vol, (0, 1), np.zeros((4, 4, 4)))


# -- view sets ----------------------------------------------------------------


def _anchor(vol, seed=0):
    return np.random.default_rng(seed).random((3,) + vol.spatial_shape)


def test_generate_views_deterministic(vol):
    cfg = VistaConfig(dilation=3)
    a = generate_views(vol, _anchor(vol), cfg, np.random.default_rng(11))
    b = generate_views(vol, _anchor(vol), cfg, np.random.default_rng(11))
    assert a.lfccs_pair == b.lfccs_pair and a.ugps_pair == b.ugps_pair
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.data, vb.data)
    assert np.array_equal(a.ugps_mask.data, b.ugps_mask.data)


def test_generate_views_anchor_is_input_and_input_untouched(vol):
    before = np.array(vol.data)
    vs = generate_views(vol, _anchor(vol), VistaConfig(dilation=3), np.random.default_rng(0))
    assert len(vs.views) == 3
    assert np.array_equal(vs.views[0].data, vol.data)
    assert np.array_equal(vol.data, before)
    assert all(v.data.shape == vol.data.shape for v in vs.views)


def test_generate_views_two_sequences_force_pair():
    v = MultiSequenceVolume(np.random.default_rng(1).normal(size=(2, 8, 8, 8)))
    for seed in range(5):
        vs = generate_views(v, np.full((3, 8, 8, 8), 0.5), VistaConfig(dilation=3), np.random.default_rng(seed))
        assert vs.lfccs_pair == (0, 1) and vs.ugps_pair == (0, 1)


def test_generate_views_shared_pair(vol):
    for seed in range(5):
        vs = generate_views(vol, _anchor(vol), VistaConfig(dilation=3, shared_pair=True), np.random.default_rng(seed))
        assert vs.lfccs_pair == vs.ugps_pair


def test_generate_views_components_match_operations(vol):
    cfg = VistaConfig(dilation=3)
    anchor = _anchor(vol, 3)
    vs = generate_views(vol, anchor, cfg, np.random.default_rng(4))
    assert np.array_equal(vs.views[1].data, lfccs_swap(vol, vs.lfccs_pair, cfg.lfccs_ratio).data)
    mask = entropy_mask(binary_entropy_map(anchor), cfg.entropy_quantile, cfg.dilation)
    assert np.array_equal(vs.views[2].data, ugps_swap(vol, vs.ugps_pair, mask).data)


def test_generate_views_ablations(vol):
    vs = generate_views(vol, _anchor(vol), VistaConfig(dilation=3, use_ugps=False), np.random.default_rng(0))
    assert vs.kinds == ("anchor", "lfccs", "lfccs") and vs.ugps_mask is None
    vs = generate_views(vol, _anchor(vol), VistaConfig(dilation=3, use_lfccs=False), np.random.default_rng(0))
    assert vs.kinds == ("anchor", "ugps", "ugps") and vs.lfccs_pair is None


def test_pair_sampling_uniform():
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(6000):
        p = sample_pair(4, rng)
        counts[p] = counts.get(p, 0) + 1
    assert len(counts) == 6
    assert all(abs(c - 1000) < 120 for c in counts.values())
