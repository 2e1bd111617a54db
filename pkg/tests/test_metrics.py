import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dive.metrics import (FeatureSet, GaussianSummary, NotPSDError, class_distances, cmc_map,
                          fid, moment_summary)
from oracles import brute_force_retrieval, cmc_from_ranks, random_fixture


def check_against_oracle(q, g, normalize):
    res = cmc_map(FeatureSet(q[0], q[1], q[2], q[3]), FeatureSet(g[0], g[1], g[2], g[3]),
                  normalize=normalize)
    ranks, aps, skipped = brute_force_retrieval(*[x.tolist() for x in q],
                                                *[x.tolist() for x in g], normalize=normalize)
    assert res.skipped == skipped
    assert res.evaluated == len(aps)
    if aps:
        np.testing.assert_array_equal(res.cmc, cmc_from_ranks(ranks, len(g[0])))
        assert res.mAP == pytest.approx(np.mean(aps), abs=1e-12)
    return res


# -- FID ----------------------------------------------------------------------

def test_fid_identical_is_zero():
    a = GaussianSummary(np.zeros(1), np.eye(1))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-9)


def test_fid_mean_shift_1d():
    assert fid(GaussianSummary([0.0], [[1.0]]), GaussianSummary([1.0], [[1.0]])) == \
        pytest.approx(1.0, abs=1e-9)


def test_fid_variance_change_1d():
    assert fid(GaussianSummary([0.0], [[1.0]]), GaussianSummary([0.0], [[4.0]])) == \
        pytest.approx(1.0, abs=1e-9)


def test_fid_dimension_mismatch():
    with pytest.raises(ValueError):
        fid(GaussianSummary(np.zeros(2), np.eye(2)), GaussianSummary(np.zeros(3), np.eye(3)))


def test_non_psd_covariance_rejected():
    with pytest.raises(NotPSDError):
        GaussianSummary(np.zeros(2), np.diag([1.0, -1e-3]))


def test_tiny_negative_eigenvalues_are_clamped():
    cov = np.diag([1.0, -1e-12])
    assert fid(GaussianSummary(np.zeros(2), cov), GaussianSummary(np.zeros(2), cov)) >= 0.0


def _random_psd(rng, d, rank=None):
    m = rng.normal(size=(d, rank or d))
    return m @ m.T


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
def test_fid_symmetric_and_rotation_invariant(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianSummary(rng.normal(size=d), _random_psd(rng, d))
    b = GaussianSummary(rng.normal(size=d), _random_psd(rng, d, rank=max(1, d - 1)))
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    ra = GaussianSummary(q @ a.mean, q @ a.cov @ q.T)
    rb = GaussianSummary(q @ b.mean, q @ b.cov @ q.T)
    f = fid(a, b)
    assert f >= 0
    assert fid(b, a) == pytest.approx(f, rel=1e-6, abs=1e-6)
    assert fid(ra, rb) == pytest.approx(f, rel=1e-6, abs=1e-6)
    assert fid(a, a) == pytest.approx(0.0, abs=1e-6)


def test_fid_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(3)
    ca, cb = _random_psd(rng, 5), _random_psd(rng, 5)
    ma, mb = rng.normal(size=5), rng.normal(size=5)
    expected = float(np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2 * np.real(sqrtm(ca @ cb))))
    assert fid(GaussianSummary(ma, ca), GaussianSummary(mb, cb)) == pytest.approx(expected,
                                                                                 rel=1e-8)


# -- moments ------------------------------------------------------------------

def test_moment_summary_two_points():
    s = moment_summary(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_allclose(s.mean, [1.0, 0.0])
    np.testing.assert_allclose(s.cov, [[2.0, 0.0], [0.0, 0.0]])


def test_moment_summary_needs_two_rows():
    with pytest.raises(ValueError):
        moment_summary(np.zeros((1, 3)))


def test_moment_summary_identical_rows_and_permutation():
    x = np.tile([1.0, -2.0, 3.0], (4, 1))
    np.testing.assert_array_equal(moment_summary(x).cov, np.zeros((3, 3)))
    rng = np.random.default_rng(0)
    y = rng.normal(size=(20, 3))
    a, b = moment_summary(y), moment_summary(y[rng.permutation(20)])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 15), st.integers(2, 15))
def test_streaming_combination_is_exact(seed, na, nb):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(na + nb, 3))
    whole = moment_summary(x)
    merged = moment_summary(x[:na]).combine(moment_summary(x[na:]))
    assert merged.n == na + nb
    np.testing.assert_allclose(merged.mean, whole.mean, atol=1e-12)
    np.testing.assert_allclose(merged.cov, whole.cov, atol=1e-10)


# -- class distances ----------------------------------------------------------

def _two_identity_set():
    m = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [2.0, 0.0]])
    return FeatureSet(m, [0, 0, 1, 1], ["visible", "infrared", "visible", "infrared"])


def test_class_distances_constructed_fixture():
    intra, inter = class_distances(_two_identity_set(), normalize=False)
    assert intra.mean == 0.0
    assert inter.mean == pytest.approx(2.0)
    assert inter.median == pytest.approx(2.0)
    assert intra.histogram.sum() == intra.count


def test_class_distances_identical_features():
    fs = FeatureSet(np.ones((4, 3)), [0, 0, 1, 1], ["visible", "infrared"] * 2)
    intra, inter = class_distances(fs)
    assert intra.mean == 0.0 and inter.mean == 0.0


def test_class_distances_degenerate_labels():
    fs = FeatureSet(np.ones((2, 3)), [0, 0], ["visible", "infrared"])
    with pytest.raises(ValueError):
        class_distances(fs)
    fs = FeatureSet(np.ones((3, 3)), [0, 0, 1], ["visible", "infrared", "visible"])
    with pytest.raises(ValueError):
        class_distances(fs)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_class_distances_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(8, 4))
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    mods = ["visible", "infrared"] * 4
    a = class_distances(FeatureSet(m, labels, mods), normalize=False)
    b = class_distances(FeatureSet(m + rng.normal(size=4) * 10, labels, mods), normalize=False)
    assert a[0].mean == pytest.approx(b[0].mean, rel=1e-9)
    assert a[1].mean == pytest.approx(b[1].mean, rel=1e-9)


# -- retrieval ----------------------------------------------------------------

def test_perfect_retrieval():
    g = FeatureSet(np.eye(3), [0, 1, 2], ["visible"] * 3, [0, 0, 0])
    q = FeatureSet(np.eye(3) + 0.01, [0, 1, 2], ["infrared"] * 3, [0, 0, 0])
    res = cmc_map(q, g)
    assert res.cmc[0] == 1.0 and res.mAP == 1.0


def test_single_query_second_rank():
    q = FeatureSet([[1.0, 0.0]], [0], ["infrared"], [0])
    g = FeatureSet([[1.0, 0.1], [0.0, 1.0]], [1, 0], ["visible", "visible"], [0, 0])
    res = cmc_map(q, g)
    assert res.cmc[0] == 0.0
    assert res.mAP == pytest.approx(0.5)


def test_same_camera_same_identity_excluded_and_skipped():
    q = FeatureSet([[1.0, 0.0]], [0], ["visible"], [0])
    g = FeatureSet([[1.0, 0.0], [0.0, 1.0]], [0, 1], ["visible", "visible"], [0, 0])
    res = cmc_map(q, g)
    assert res.skipped == 1 and res.evaluated == 0


def test_ties_break_by_gallery_index():
    q = FeatureSet([[0.0, 0.0]], [0], ["infrared"], [0])
    g = FeatureSet([[1.0, 0.0], [1.0, 0.0]], [1, 0], ["visible"] * 2, [0, 0])
    assert cmc_map(q, g, normalize=False).cmc[0] == 0.0
    g = FeatureSet([[1.0, 0.0], [1.0, 0.0]], [0, 1], ["visible"] * 2, [0, 0])
    assert cmc_map(q, g, normalize=False).cmc[0] == 1.0


def test_cmc_matches_oracle_on_100_fixtures():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        nq, ng = int(rng.integers(1, 31)), int(rng.integers(1, 61))
        q, g = random_fixture(rng, nq, ng, ties=trial % 4 == 0)
        res = check_against_oracle(q, g, normalize=trial % 2 == 0)
        if res.evaluated:
            assert np.all(np.diff(res.cmc) >= 0)
            assert res.cmc[-1] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 30), st.integers(1, 60), st.booleans())
def test_cmc_oracle_property(seed, nq, ng, ties):
    rng = np.random.default_rng(seed)
    q, g = random_fixture(rng, nq, ng, ties=ties)
    check_against_oracle(q, g, normalize=not ties)


def test_feature_set_validation():
    with pytest.raises(ValueError):
        FeatureSet([[np.nan, 0.0]], [0], ["visible"])
    with pytest.raises(ValueError):
        FeatureSet([[2.0, 0.0]], [0], ["visible"], normalized=True)
    with pytest.raises(ValueError):
        FeatureSet([[1.0, 0.0]], [0, 1], ["visible"])
    fs = FeatureSet([[3.0, 4.0]], [0], ["visible"]).normalize()
    np.testing.assert_allclose(fs.matrix, [[0.6, 0.8]])
