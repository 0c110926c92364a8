import itertools

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import subspace_angles

from n4fields.errors import ConfigError, FormatError, ShapeError
from n4fields.targets import (EDGE_SENTINEL, PairwiseEncoding, as_stored, decode, encode,
                              fit_alternative_codec, fit_pca, load_codec, pairwise_vector,
                              save_codec, segments_from_edges)


def eigen_oracle(x, k):
    """Top-k principal directions from a dense SVD of the centred data."""
    c = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(c, full_matrices=False)
    return vt[:k], s ** 2 / max(len(x) - 1, 1)


@pytest.mark.parametrize("n,d", [(300, 20), (15, 40)])  # primal and dual routes
def test_subspace_matches_eigen_oracle(rng, n, d):
    x = rng.normal(size=(n, d)) * np.linspace(4, 0.2, d)
    codec = fit_pca(x, 5)
    ref, var = eigen_oracle(x, 5)
    assert np.max(subspace_angles(codec.basis.T, ref.T)) < 1e-8
    npt.assert_allclose(codec.explained_variance, var[:5], rtol=1e-8)
    npt.assert_allclose(codec.mean, x.mean(axis=0), atol=1e-12)


def test_primal_and_dual_routes_agree(rng):
    x = rng.normal(size=(30, 30)) * np.linspace(3, 0.5, 30)
    primal = fit_pca(x, 4)
    dual = fit_pca(x[:29], 4)  # n < d forces the Gram route
    ref_dual, _ = eigen_oracle(x[:29], 4)
    ref_primal, _ = eigen_oracle(x, 4)
    assert np.max(subspace_angles(dual.basis.T, ref_dual.T)) < 1e-8
    assert np.max(subspace_angles(primal.basis.T, ref_primal.T)) < 1e-8


def test_basis_orthonormal_and_variance_sorted(rng):
    for n, d in [(200, 16), (10, 64)]:
        codec = fit_pca(rng.random((n, d)), 8)
        npt.assert_allclose(codec.basis @ codec.basis.T, np.eye(8), atol=1e-8)
        assert np.all(np.diff(codec.explained_variance) <= 0)


def test_two_point_example():
    codec = fit_pca(np.array([[1.0, 0.0], [-1.0, 0.0]]), 1)
    npt.assert_allclose(np.abs(codec.basis), [[1.0, 0.0]], atol=1e-12)
    codes = encode(codec, np.array([[1.0, 0.0], [-1.0, 0.0]]))
    npt.assert_allclose(np.abs(codes[:, 0]), [1.0, 1.0], atol=1e-12)
    assert codes[0, 0] == -codes[1, 0]


def test_identical_samples_give_zero_variance():
    x = np.tile(np.arange(9.0) / 9, (12, 1))
    codec = fit_pca(x, 3)
    npt.assert_allclose(codec.mean, x[0])
    npt.assert_array_equal(codec.explained_variance, 0.0)
    npt.assert_allclose(encode(codec, x), 0.0, atol=1e-12)
    npt.assert_allclose(codec.basis @ codec.basis.T, np.eye(3), atol=1e-12)


def test_identical_samples_dual_route():
    x = np.ones((3, 50))
    codec = fit_pca(x, 2)
    npt.assert_array_equal(codec.explained_variance, 0.0)
    npt.assert_allclose(encode(codec, x), 0.0, atol=1e-12)


def test_full_rank_round_trip(rng):
    x = rng.random((100, 16))
    codec = fit_pca(x, 16)
    back = decode(codec, encode(codec, x), clamp=False)
    npt.assert_allclose(back, x, atol=1e-8)


def test_fit_errors(rng):
    with pytest.raises(ConfigError):
        fit_pca(rng.random((10, 4)), 5)
    with pytest.raises(ConfigError):
        fit_pca(rng.random((3, 8)), 4)
    with pytest.raises(ShapeError):
        fit_pca(rng.random(8), 1)


def test_encode_examples(rng):
    x = rng.integers(0, 2, (200, 16, 16)).astype(float)
    x[:20] = 0.0
    codec = fit_pca(x.reshape(200, -1), 16)
    npt.assert_allclose(encode(codec, codec.mean), 0.0, atol=1e-12)
    codes = encode(codec, x[:20])
    npt.assert_array_equal(codes, np.repeat(codes[:1], 20, axis=0))
    p = x[50].ravel()
    naive = [sum(codec.basis[k, i] * (p[i] - codec.mean[i]) for i in range(256))
             for k in range(16)]
    npt.assert_allclose(encode(codec, x[50]), naive, atol=1e-10)
    assert encode(codec, x[50]).shape == (16,)
    assert encode(codec, x[:3]).shape == (3, 16)
    with pytest.raises(ShapeError):
        encode(codec, np.zeros(255))


def test_decode_examples(rng):
    codec = fit_pca(rng.random((50, 9)) * 2 - 0.5, 3)
    npt.assert_allclose(decode(codec, np.zeros(3)), np.clip(codec.mean, 0, 1))
    assert decode(codec, rng.normal(size=(4, 3)) * 10).max() <= 1.0
    with pytest.raises(ShapeError):
        decode(codec, np.zeros(4))


def test_residual_equals_discarded_spectrum(rng):
    x = rng.normal(size=(400, 12)) * np.linspace(3, 0.3, 12)
    codec = fit_pca(x, 4)
    resid = x - decode(codec, encode(codec, x), clamp=False)
    _, var = eigen_oracle(x, 12)
    npt.assert_allclose(np.sum(resid ** 2), (len(x) - 1) * var[4:].sum(), rtol=1e-8)


def test_reconstruction_error_non_increasing(rng):
    x = rng.integers(0, 2, (500, 64)).astype(float)
    errs = []
    for k in (1, 2, 4, 8, 16):
        codec = fit_pca(x, k)
        errs.append(np.sum((x - decode(codec, encode(codec, x), clamp=False)) ** 2))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


@given(arrays(np.float64, (6, 5), elements=st.floats(-5, 5)),
       arrays(np.float64, (5,), elements=st.floats(-5, 5)))
def test_projection_energy_bounded(samples, probe):
    x = np.vstack([samples, samples[::-1] + 1.0])
    codec = fit_pca(x, 3)
    code = encode(codec, probe)
    assert np.sum(code ** 2) <= np.sum((probe - codec.mean) ** 2) + 1e-10


def test_codec_persistence_round_trip(tmp_path, rng):
    codec = as_stored(fit_pca(rng.random((80, 10)), 4))
    save_codec(codec, tmp_path / "c.n4pc")
    back = load_codec(tmp_path / "c.n4pc")
    for a, b in [(codec.mean, back.mean), (codec.basis, back.basis),
                 (codec.explained_variance, back.explained_variance)]:
        assert a.tobytes() == b.tobytes()
    probe = rng.random((5, 10))
    assert encode(codec, probe).tobytes() == encode(back, probe).tobytes()
    raw = (tmp_path / "c.n4pc").read_bytes()
    assert raw[:4] == b"N4PC" and len(raw) == 4 + 8 + 4 * (10 + 40 + 4)
    (tmp_path / "bad.n4pc").write_bytes(b"N4PX" + raw[4:])
    with pytest.raises(FormatError):
        load_codec(tmp_path / "bad.n4pc")


# -- pairwise encoding ------------------------------------------------------

def pairs_oracle(seg):
    flat = np.asarray(seg).ravel()
    return np.array([int(flat[l] == flat[m])
                     for l, m in itertools.combinations(range(flat.size), 2)], dtype=np.uint8)


def test_pairwise_length():
    assert PairwiseEncoding(16).length == 32640
    l, m = PairwiseEncoding(16).pair_index
    assert len(l) == 32640 and np.all(l < m)


def test_pairwise_examples():
    enc = PairwiseEncoding(2)
    npt.assert_array_equal(pairwise_vector([[0, 0], [1, 1]], enc), [1, 0, 0, 0, 0, 1])
    npt.assert_array_equal(pairwise_vector(np.full((4, 4), 3), PairwiseEncoding(4)), 1)
    with pytest.raises(ShapeError):
        pairwise_vector(np.zeros((3, 3)), enc)


@pytest.mark.parametrize("n", [2, 3])
def test_pairwise_exhaustive_two_segment_patterns(n):
    enc = PairwiseEncoding(n)
    for bits in itertools.product((0, 1), repeat=n * n):
        if len(set(bits)) < 2:
            continue
        seg = np.array(bits).reshape(n, n)
        npt.assert_array_equal(pairwise_vector(seg, enc), pairs_oracle(seg))


def test_pairwise_in_lexicographic_order():
    l, m = PairwiseEncoding(3).pair_index
    assert list(zip(l, m)) == list(itertools.combinations(range(9), 2))


@given(arrays(np.int64, (4, 4), elements=st.integers(0, 3)), st.permutations(range(4)))
def test_pairwise_invariant_to_relabelling(seg, perm):
    enc = PairwiseEncoding(4)
    relabelled = np.asarray(perm)[seg] + 10
    npt.assert_array_equal(pairwise_vector(seg, enc), pairwise_vector(relabelled, enc))


def test_segments_from_edges():
    edge = np.zeros((5, 5))
    edge[:, 2] = 1
    seg = segments_from_edges(edge)
    assert np.all(seg[:, 2] == EDGE_SENTINEL)
    assert len(set(seg[:, :2].ravel())) == 1 and len(set(seg[:, 3:].ravel())) == 1
    assert seg[0, 0] != seg[0, 4]
    assert segments_from_edges(np.stack([edge, edge])).shape == (2, 5, 5)


def test_alternative_codec_uniform_is_zero_variance():
    codec = fit_alternative_codec(np.zeros((6, 4, 4), int), PairwiseEncoding(4), 3)
    npt.assert_array_equal(codec.explained_variance, 0.0)


def test_alternative_codec_matches_eigen_oracle(rng):
    enc = PairwiseEncoding(4)
    segs = rng.integers(0, 3, (20, 4, 4))
    codec = fit_alternative_codec(segs, enc, 5)
    vectors = np.array([pairs_oracle(s) for s in segs], dtype=float)
    ref, _ = eigen_oracle(vectors, 5)
    assert np.max(subspace_angles(codec.basis.T, ref.T)) < 1e-8


def test_alternative_codec_16_dims(rng):
    edges = rng.random((60, 16, 16)) < 0.1
    codec = fit_alternative_codec(segments_from_edges(edges), PairwiseEncoding(16), 16)
    assert codec.code_dim == 16 and codec.input_dim == 32640
