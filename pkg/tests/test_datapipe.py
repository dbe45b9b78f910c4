import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays
from scipy import ndimage

from physvae import datapipe as dp


# ---------------------------------------------------------------- patches


def test_exact_tiling():
    img = np.arange(64, dtype=float).reshape(8, 8) / 63
    ps = dp.extract_patches(img, s=4, stride=4)
    assert ps.grid_shape == (2, 2) and len(ps) == 4
    np.testing.assert_array_equal(ps.coords, [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_floor_formula_grid():
    img = np.random.default_rng(0).uniform(size=(37, 41))
    assert dp.extract_patches(img, s=16, stride=2).grid_shape == (11, 13)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 9), st.integers(1, 5), st.integers(0, 1000))
def test_patches_match_windows(s, stride, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(s + stride * int(rng.integers(1, 6)), s + stride * int(rng.integers(1, 6))))
    ps = dp.extract_patches(img, s, stride)
    gh, gw = ps.grid_shape
    assert len(ps) == gh * gw
    for i, (r, c) in enumerate(ps.coords):
        assert i == r * gw + c
        window = img[r * stride : r * stride + s, c * stride : c * stride + s]
        np.testing.assert_array_equal(ps.patches[i], dp.normalize_patch(window).ravel())


def test_flat_patch_guard():
    img = np.zeros((8, 8))
    img[4:, 4:] = np.random.default_rng(1).uniform(size=(4, 4))
    ps = dp.extract_patches(img, s=4, stride=4)
    assert not ps.patches[0].any()
    assert ps.patches[3].min() == 0.0 and ps.patches[3].max() == 1.0


def test_extract_errors():
    img = np.zeros((10, 10))
    with pytest.raises(ValueError):
        dp.extract_patches(img, s=2)
    with pytest.raises(ValueError):
        dp.extract_patches(img, s=4, stride=0)
    with pytest.raises(ValueError, match="too small"):
        dp.extract_patches(img, s=9, stride=2)


def test_micrograph_validation():
    with pytest.raises(ValueError):
        dp.Micrograph(np.array([[0.0, 1.5]]))
    with pytest.raises(ValueError):
        dp.Micrograph(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        dp.Micrograph(np.zeros(4))


def test_grid_majority():
    lab = np.zeros((6, 6), dtype=int)
    lab[:, 3:] = 1
    # the middle window straddles the edge 1:1 and ties go to the smaller label
    np.testing.assert_array_equal(dp.grid_majority(lab, 2, 2, 2), [[0, 0, 1]] * 3)


# -------------------------------------------------------------- synthetic


def test_two_phase_noiseless_value_is_lattice_formula():
    t = dp.synth_two_phase(seed=3, side=128, noise=0.0, sharpness=2.0)
    ph = np.array(t.meta["lattice_phases"])
    (fa, tha), (fb, thb) = t.meta["textures"]
    a = dp.lattice_texture((128, 128), fa, tha, tuple(ph[0]), 2.0)
    b = dp.lattice_texture((128, 128), fb, thb, tuple(ph[1]), 2.0)
    clean = np.where(t.pixel_mask == 0, a, b)
    lo, hi = clean.min(), clean.max()
    r, c = 64, 5  # deep inside phase 0 (boundary sits near column 64)
    assert t.pixel_mask[r, c] == 0
    assert t.micrograph.pixels[r, c] == (a[r, c] - lo) / (hi - lo)


@pytest.mark.parametrize("gen", [dp.synth_two_phase, dp.synth_multiphase])
def test_generators_bit_identical(gen):
    a, b = gen(seed=11), gen(seed=11)
    assert np.array_equal(a.micrograph.pixels, b.micrograph.pixels)
    assert np.array_equal(a.phase_mask, b.phase_mask)
    assert a.meta == b.meta
    assert not np.array_equal(a.micrograph.pixels, gen(seed=12).micrograph.pixels)


@pytest.mark.parametrize("seed", range(5))
def test_boundary_length_matches_curve(seed):
    t = dp.synth_two_phase(seed=seed)
    measured = dp.mask_boundary_length(t.pixel_mask)
    assert abs(measured - t.meta["boundary_length"]) <= 0.1 * t.meta["boundary_length"]


def test_two_phase_mask_shape_matches_patch_grid():
    t = dp.synth_two_phase(seed=0)
    ps = dp.extract_patches(t.micrograph, 16, 2)
    assert t.phase_mask.shape == ps.grid_shape == (121, 121)
    assert set(np.unique(t.phase_mask)) == {0, 1}
    with pytest.raises(ValueError):
        dp.synth_two_phase(side=64)


def _dominant_frequency(window: np.ndarray) -> float:
    n = window.shape[0]
    taper = np.outer(np.hanning(n), np.hanning(n))
    power = np.abs(np.fft.fftshift(np.fft.fft2((window - window.mean()) * taper))) ** 2
    ky, kx = np.unravel_index(np.argmax(power), power.shape)
    return float(np.hypot(ky - n // 2, kx - n // 2) / n)


@pytest.mark.parametrize("n_phases", [3, 4])
def test_multiphase_regions_carry_their_texture(n_phases):
    t = dp.synth_multiphase(seed=2, n_phases=n_phases, noise=0.0)
    mask, img, n = t.pixel_mask, t.micrograph.pixels, 48
    # partition: every pixel has exactly one label in range
    assert set(np.unique(mask)) == set(range(n_phases))
    for i in range(n_phases):
        # pad so the image border counts as outside the region
        depth = ndimage.distance_transform_edt(np.pad(mask == i, 1))[1:-1, 1:-1]
        r, c = np.unravel_index(np.argmax(depth), depth.shape)
        assert depth[r, c] > n / 2 * np.sqrt(2), "region too small for a clean window"
        win = img[r - n // 2 : r + n // 2, c - n // 2 : c + n // 2]
        freq = t.meta["textures"][i][0]
        assert abs(_dominant_frequency(win) - freq) <= 1.5 / n


def test_multiphase_errors():
    with pytest.raises(ValueError):
        dp.synth_multiphase(n_phases=2)
    with pytest.raises(ValueError):
        dp.synth_multiphase(n_phases=4, textures=dp.DEFAULT_TEXTURES[:3])


# ------------------------------------------------------------------ tensor


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_tensor_round_trip_bit_exact(a):
    back, end = dp.tensor_from_bytes(dp.tensor_to_bytes(a))
    assert back.shape == a.shape
    assert back.tobytes() == a.tobytes()  # NaN payloads and signed zeros included


def test_tensor_file_round_trip(tmp_path):
    a = np.array([[1.0, -2.5], [np.pi, 1e-300]])
    dp.write_tensor(tmp_path / "a.pvtn", a)
    b = dp.read_tensor(tmp_path / "a.pvtn")
    assert b.tobytes() == a.tobytes()
    raw = (tmp_path / "a.pvtn").read_bytes()
    assert raw[:4] == b"PVTN"
    assert raw[4:8] == (1).to_bytes(4, "little") and raw[8] == 1


def test_tensor_format_errors(tmp_path):
    good = dp.tensor_to_bytes(np.ones((2, 2)))
    with pytest.raises(dp.FormatError) as e:
        dp.tensor_from_bytes(b"XXXX" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(dp.FormatError, match="truncated") as e:
        dp.tensor_from_bytes(good[:-3])
    assert e.value.offset == len(good) - 3
    (tmp_path / "t.pvtn").write_bytes(good + b"\0")
    with pytest.raises(dp.FormatError, match="trailing"):
        dp.read_tensor(tmp_path / "t.pvtn")
    bad_dtype = good[:8] + b"\x02" + good[9:]
    with pytest.raises(dp.FormatError) as e:
        dp.tensor_from_bytes(bad_dtype)
    assert e.value.offset == 8


# --------------------------------------------------------------------- PGM


def test_pgm_quantization(tmp_path):
    dp.write_pgm(tmp_path / "a.pgm", np.array([[0.5, 0.0], [1.0, 0.25]]))
    raw, maxval = dp.read_pgm_raw(tmp_path / "a.pgm")
    np.testing.assert_array_equal(raw, [[128, 0], [255, 64]])
    assert maxval == 255
    assert dp.read_pgm(tmp_path / "a.pgm")[0, 0] == 128 / 255


def test_pgm_16bit_round_trip(tmp_path):
    img = np.random.default_rng(2).uniform(size=(5, 3))
    dp.write_pgm(tmp_path / "b.pgm", img, maxval=65535)
    back = dp.read_pgm(tmp_path / "b.pgm")
    np.testing.assert_array_equal(back, np.round(img * 65535) / 65535)


def test_pgm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(dp.read_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])


def test_pgm_errors(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"XXXX")
    with pytest.raises(dp.FormatError) as e:
        dp.read_pgm(tmp_path / "x.pgm")
    assert e.value.offset == 0
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(dp.FormatError, match="truncated"):
        dp.read_pgm(tmp_path / "t.pgm")
    (tmp_path / "m.pgm").write_bytes(b"P5\n1 1\n7\n\x00")
    with pytest.raises(dp.FormatError, match="maxval"):
        dp.read_pgm(tmp_path / "m.pgm")
    with pytest.raises(ValueError):
        dp.write_pgm(tmp_path / "y.pgm", np.zeros((2, 2)), maxval=100)


# ----------------------------------------------------------- patch files


def test_patchset_round_trip(tmp_path):
    t = dp.synth_two_phase(seed=1, side=128)
    ps = dp.extract_patches(t.micrograph, 16, 4)
    dp.save_patchset(tmp_path / "p", ps)
    back = dp.load_patchset(tmp_path / "p")
    assert back.patches.tobytes() == ps.patches.tobytes()
    np.testing.assert_array_equal(back.coords, ps.coords)
    assert (back.grid_shape, back.patch_side, back.stride) == (ps.grid_shape, 16, 4)
    header, rows = dp.read_csv(tmp_path / "p_coords.csv")
    assert header == ["index", "row", "col"] and len(rows) == len(ps)


def test_patchset_mismatch(tmp_path):
    ps = dp.extract_patches(np.random.default_rng(0).uniform(size=(12, 12)), 4, 4)
    dp.save_patchset(tmp_path / "p", ps)
    (tmp_path / "p.json").write_text('{"grid_shape": [2, 2], "patch_side": 4, "stride": 4}')
    with pytest.raises(dp.FormatError):
        dp.load_patchset(tmp_path / "p")
