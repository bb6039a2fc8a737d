import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsen import data
from rsen.data import FormatError, HsiCube, ParameterError


# ---- HSC1 files ----------------------------------------------------------

def test_cube_round_trip_single_value(tmp_path):
    path = tmp_path / "one.hsc"
    data.save_cube(HsiCube(np.full((1, 1, 1), 7.0, dtype=np.float32)), path)
    cube = data.load_cube(path)
    assert cube.values.shape == (1, 1, 1) and cube.values[0, 0, 0] == 7.0


def test_cube_round_trip_bit_exact(tmp_path):
    vals = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "c.hsc"
    data.save_cube(HsiCube(vals), path)
    assert np.array_equal(data.load_cube(path).values, vals)
    raw = path.read_bytes()
    assert raw[:4] == b"HSC1"
    assert struct.unpack("<3I", raw[4:16]) == (3, 4, 5)
    # pixel-major, band fastest
    assert struct.unpack("<2f", raw[16:24]) == tuple(vals[0, 0, :2].tolist())


def test_cube_truncated(tmp_path):
    path = tmp_path / "c.hsc"
    data.save_cube(HsiCube(np.ones((2, 2, 3), dtype=np.float32)), path)
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(FormatError, match="truncated"):
        data.load_cube(path)


def test_cube_header_payload_mismatch(tmp_path):
    path = tmp_path / "c.hsc"
    path.write_bytes(b"HSC1" + struct.pack("<3I", 2, 2, 3) + np.zeros(11, "<f4").tobytes())
    with pytest.raises(FormatError, match="byte offset"):
        data.load_cube(path)


def test_cube_bad_magic_and_nonfinite(tmp_path):
    path = tmp_path / "c.hsc"
    path.write_bytes(b"HSC2" + struct.pack("<3I", 1, 1, 1) + np.zeros(1, "<f4").tobytes())
    with pytest.raises(FormatError, match="magic"):
        data.load_cube(path)
    vals = np.zeros(4, "<f4")
    vals[2] = np.nan
    path.write_bytes(b"HSC1" + struct.pack("<3I", 1, 2, 2) + vals.tobytes())
    with pytest.raises(FormatError, match="byte offset 24"):
        data.load_cube(path)


def test_labels_round_trip(tmp_path):
    lab = np.random.default_rng(1).integers(0, 6, size=(4, 7))
    path = tmp_path / "l.txt"
    data.save_labels(lab, path)
    assert path.read_text().splitlines()[0] == "4 7"
    assert np.array_equal(data.load_labels(path), lab)


def test_labels_bad_rows(tmp_path):
    path = tmp_path / "l.txt"
    path.write_text("2 2\n1 2\n")
    with pytest.raises(FormatError):
        data.load_labels(path)


# ---- normalize -----------------------------------------------------------

def test_normalize_examples():
    v = np.zeros((1, 3, 2))
    v[0, :, 0] = [2, 4, 6]
    v[0, :, 1] = 3.0
    out = data.normalize(HsiCube(v)).values
    assert out[0, :, 0].tolist() == [0.0, 0.5, 1.0]
    assert np.all(out[..., 1] == 0)


def test_normalize_idempotent():
    cube = HsiCube(np.random.default_rng(2).normal(size=(5, 6, 4)))
    once = data.normalize(cube)
    np.testing.assert_allclose(data.normalize(once).values, once.values, atol=1e-15)


# ---- PCA -----------------------------------------------------------------

def test_pca_rank_one():
    t = np.linspace(-1, 1, 30)
    pts = np.outer(t, [1.0, 2.0, -1.0]) + [0.3, 0.1, 0.0]
    red = data.pca_reduce(HsiCube(pts.reshape(5, 6, 3)), 1)
    assert abs(red.explained_variance_ratio[0] - 1.0) <= 1e-10


def test_pca_two_directions_variance_ratio():
    b = 1.0
    a = 2.0 * b
    pts = np.array([[a, 0], [-a, 0], [0, b], [0, -b]], dtype=float)
    cov = np.cov(pts.T)  # independent oracle: closed-form 2x2 eigenvalues
    tr, det = np.trace(cov), np.linalg.det(cov)
    disc = np.sqrt(tr * tr / 4 - det)
    lam = np.array([tr / 2 + disc, tr / 2 - disc])
    red = data.pca_reduce(HsiCube(pts.reshape(2, 2, 2)), 2)
    np.testing.assert_allclose(red.explained_variance_ratio, lam / lam.sum(), atol=1e-12)
    np.testing.assert_allclose(red.explained_variance_ratio, [0.8, 0.2], atol=1e-12)


def test_pca_full_rank_reconstruction_and_orthonormality():
    cube = HsiCube(np.random.default_rng(3).normal(size=(6, 5, 4)))
    red = data.pca_reduce(cube, 4)
    X = cube.values.reshape(-1, 4)
    centered = X - X.mean(axis=0)
    recon = red.values.reshape(-1, 4) @ red.loadings.T
    np.testing.assert_allclose(recon, centered, atol=1e-8)
    np.testing.assert_allclose(red.loadings.T @ red.loadings, np.eye(4), atol=1e-10)
    assert np.all(np.diff(red.eigenvalues) <= 0)
    # sign rule
    for j in range(4):
        col = red.loadings[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_pca_bad_p():
    cube = HsiCube(np.ones((3, 3, 2)))
    with pytest.raises(ParameterError):
        data.pca_reduce(cube, 3)
    with pytest.raises(ParameterError):
        data.pca_reduce(cube, 0)


# ---- patches -------------------------------------------------------------

def reflect_loop(i, n):
    if n == 1:
        return 0
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def _grid(rows, cols, p=1):
    vals = np.arange(rows * cols * p, dtype=float).reshape(rows, cols, p)
    return HsiCube(vals), data.ReducedCube(vals, np.eye(p), np.zeros(p), np.ones(p))


def test_patch_w1_is_pixel():
    cube, red = _grid(4, 4, 3)
    s = data.extract_sample(cube, red, 2, 1, 1)
    assert s.patch.shape == (1, 1, 3) and np.array_equal(s.patch[0, 0], red.values[2, 1])
    assert np.array_equal(s.spectral, cube.values[2, 1])


def test_patch_corner_hand_mirrored():
    cube, red = _grid(3, 3)
    s = data.extract_sample(cube, red, 0, 0, 4)
    # offsets -2..1 around 0 reflect to rows/cols [2, 1, 0, 1]
    g = red.values[..., 0]
    expected = np.array([
        [g[2, 2], g[2, 1], g[2, 0], g[2, 1]],
        [g[1, 2], g[1, 1], g[1, 0], g[1, 1]],
        [g[0, 2], g[0, 1], g[0, 0], g[0, 1]],
        [g[1, 2], g[1, 1], g[1, 0], g[1, 1]],
    ])
    assert np.array_equal(s.patch[..., 0], expected)
    assert s.patch[2, 2, 0] == g[0, 0]


def test_patch_interior_is_plain_slice():
    cube, red = _grid(20, 20, 2)
    s = data.extract_sample(cube, red, 10, 9, 6)
    assert np.array_equal(s.patch, red.values[7:13, 6:12])


def test_patch_out_of_bounds():
    cube, red = _grid(3, 3)
    with pytest.raises(IndexError):
        data.extract_sample(cube, red, 3, 0, 2)


@pytest.mark.parametrize("w", [1, 2, 4, 6, 8, 12])
def test_patches_match_bruteforce_index_oracle(w):
    cube, red = _grid(5, 5, 2)
    feats = data.SceneFeatures(cube, red, w)
    idx = np.arange(25)
    spec, patches = feats.batch(idx)
    for flat in idx:
        r, c = divmod(int(flat), 5)
        single = data.extract_sample(cube, red, r, c, w)
        expect = np.empty((w, w, 2))
        for i in range(w):
            for j in range(w):
                expect[i, j] = red.values[reflect_loop(r + i - w // 2, 5), reflect_loop(c + j - w // 2, 5)]
        assert np.array_equal(single.patch, expect)
        assert np.array_equal(patches[flat], expect)
        assert np.array_equal(spec[flat], cube.values[r, c])


# ---- splits --------------------------------------------------------------

def _labelmap():
    lab = np.zeros((10, 10), dtype=int)
    lab[:3] = 1
    lab[3:6, :5] = 2
    lab[6, :4] = 3  # exactly 4 pixels
    return lab


def test_split_partition_and_exhaustion():
    lab = _labelmap()
    sp = data.split_dataset(lab, 4, seed=5)
    train = sp.labeled_indices
    ref = np.flatnonzero(lab.reshape(-1) > 0)
    assert np.intersect1d(train, sp.test).size == 0
    assert np.array_equal(np.sort(np.concatenate([train, sp.test])), ref)
    assert np.array_equal(np.sort(sp.labeled[3]), np.flatnonzero(lab.reshape(-1) == 3))
    assert not np.any(lab.reshape(-1)[sp.test] == 3)
    for c in (1, 2, 3):
        assert sp.labeled[c].size == 4


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_split_partition_any_seed(seed):
    lab = _labelmap()
    sp = data.split_dataset(lab, 3, seed)
    ref = np.flatnonzero(lab.reshape(-1) > 0)
    assert np.array_equal(np.sort(np.concatenate([sp.labeled_indices, sp.test])), ref)
    assert np.intersect1d(sp.labeled_indices, sp.test).size == 0


def test_split_deterministic_and_small_class_warning():
    lab = _labelmap()
    with pytest.warns(UserWarning, match="class 3"):
        a = data.split_dataset(lab, 6, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = data.split_dataset(lab, 6, seed=1)
    assert a.warnings and a.labeled[3].size == 4
    assert np.array_equal(a.labeled_indices, b.labeled_indices)
    assert np.array_equal(a.test, b.test)


def test_sample_unlabeled():
    lab = _labelmap()
    ref = np.flatnonzero(lab.reshape(-1) > 0)
    full = data.sample_unlabeled(lab, ref.size, 3)
    assert np.array_equal(np.sort(full), ref)
    some = data.sample_unlabeled(lab, 20, 3)
    assert np.unique(some).size == 20
    assert np.array_equal(some, data.sample_unlabeled(lab, 20, 3))
    with pytest.warns(UserWarning):
        clamped = data.sample_unlabeled(lab, 10_000, 3)
    assert clamped.size == ref.size


# ---- augmentation --------------------------------------------------------

class ZeroStream:
    def standard_normal(self, shape):
        return np.zeros(shape)


def _sample():
    rng = np.random.default_rng(0)
    return data.Sample(1, 2, rng.normal(size=6), rng.normal(size=(4, 4, 3)), label=2)


def test_augment_zero_stream_identity():
    s = _sample()
    out = data.augment(s, ZeroStream())
    assert np.array_equal(out.spectral, s.spectral) and np.array_equal(out.patch, s.patch)


def test_augment_moments():
    s = data.Sample(0, 0, np.zeros(100), np.zeros((10, 10, 9)), label=1)
    rng = np.random.default_rng(7)
    noise = np.concatenate([
        np.concatenate([(o := data.augment(s, rng)).spectral, o.patch.ravel()]) for _ in range(100)
    ])
    assert noise.size == 100_000
    assert abs(noise.mean()) <= 0.01
    assert abs(noise.std() - 0.5) <= 0.01


def test_augment_stochastic_and_preserving():
    s = _sample()
    before = (s.spectral.copy(), s.patch.copy())
    rng = np.random.default_rng(1)
    a, b = data.augment(s, rng), data.augment(s, rng)
    assert not np.array_equal(a.spectral, b.spectral)
    assert np.array_equal(s.spectral, before[0]) and np.array_equal(s.patch, before[1])
    assert a.label == 2 and a.patch.shape == s.patch.shape and a.spectral.shape == s.spectral.shape


# ---- synthetic -----------------------------------------------------------

def test_synthetic_labels_cover_classes():
    cube, lab = data.generate_synthetic(20, 30, 8, 4, seed=3)
    assert cube.values.shape == (20, 30, 8) and lab.shape == (20, 30)
    assert lab.min() == 1 and lab.max() == 4
    assert all(np.any(lab == c) for c in range(1, 5))


def test_synthetic_zero_noise_identical_spectra():
    cube, lab = data.generate_synthetic(20, 20, 6, 3, seed=1, noise_std=0.0)
    for c in (1, 2, 3):
        px = cube.values[lab == c]
        assert np.all(px == px[0])


def test_synthetic_deterministic():
    a = data.generate_synthetic(16, 16, 5, 3, seed=9)
    b = data.generate_synthetic(16, 16, 5, 3, seed=9)
    assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("seed", range(10))
def test_synthetic_nearest_mean_oracle(seed):
    cube, lab, sig = data.generate_synthetic(64, 64, 16, 5, seed, noise_std=0.1, return_signatures=True)
    X = cube.values.reshape(-1, 16).astype(float)
    d = ((X[:, None, :] - sig[None]) ** 2).sum(-1)
    acc = np.mean(d.argmin(axis=1) + 1 == lab.reshape(-1))
    assert acc > 0.95


@pytest.mark.parametrize("args", [(10, 10, 4, 1), (5, 5, 4, 2), (10, 10, 0, 2)])
def test_synthetic_parameter_errors(args):
    with pytest.raises(ParameterError):
        data.generate_synthetic(*args, seed=0)
