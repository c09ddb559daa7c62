import math

import numpy as np
import pytest

from scoredenoise.oracle import (
    EmpiricalConvolvedModel,
    LocalEmpiricalScore,
    PlaneGaussianModel,
    empirical_log_density,
    empirical_score,
    normalized_plane_score,
    plane_score,
)


def fd_grad(f, x, h):
    g = np.zeros(3)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[a] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestLogDensity:
    def test_single_term(self):
        m = EmpiricalConvolvedModel([[1.0, 2.0, 3.0]], 0.5)
        x = np.array([1.5, 1.0, 3.0])
        assert np.isclose(empirical_log_density(m, x), -1.25 / (2 * 0.25), rtol=1e-15)

    def test_equidistant_pair(self):
        m = EmpiricalConvolvedModel([[-1.0, 0, 0], [1.0, 0, 0]], 0.7)
        x = np.array([0.0, 0.3, 0.0])
        single = -(1.0 + 0.09) / (2 * 0.49)
        assert np.isclose(empirical_log_density(m, x), math.log(2) + single, rtol=1e-14)

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(20, 3))
        m = EmpiricalConvolvedModel(y, 0.8)
        for x in rng.normal(size=(50, 3)):
            naive = math.log(sum(math.exp(-float(np.sum((x - yj) ** 2)) / (2 * 0.64)) for yj in y))
            assert abs(empirical_log_density(m, x) - naive) <= 1e-10

    def test_no_underflow_at_small_sigma(self):
        m = EmpiricalConvolvedModel([[0.0, 0, 0], [1.0, 0, 0]], 1e-3)
        v = empirical_log_density(m, np.array([0.5, 0, 0]))
        assert np.isfinite(v)
        assert np.isclose(v, math.log(2) - 0.25 / 2e-6)

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            EmpiricalConvolvedModel([[0.0, 0, 0]], 0.0)


class TestEmpiricalScore:
    def test_single_point(self):
        m = EmpiricalConvolvedModel([[1.0, 0, 0]], 0.5)
        np.testing.assert_allclose(empirical_score(m, np.array([0.0, 1, 0])), [4, -4, 0])

    def test_symmetric_midpoint(self):
        m = EmpiricalConvolvedModel([[-1.0, 0, 0], [1.0, 0, 0]], 0.3)
        assert empirical_score(m, np.array([0.0, 0.2, -0.1]))[0] == 0.0

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        m = EmpiricalConvolvedModel(rng.normal(size=(30, 3)), 0.6)
        for x in rng.normal(size=(50, 3)):
            fd = fd_grad(lambda p: empirical_log_density(m, p), x, 1e-5)
            an = empirical_score(m, x)
            rel = np.linalg.norm(an - fd) / max(np.linalg.norm(an), 1e-8)
            assert rel < 1e-5

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        m = EmpiricalConvolvedModel(rng.normal(size=(10, 3)), 0.4)
        xs = rng.normal(size=(5, 3))
        batch = empirical_score(m, xs)
        for x, row in zip(xs, batch):
            np.testing.assert_allclose(empirical_score(m, x), row, rtol=1e-13, atol=1e-13)

    def test_ascent_increases_density(self):
        rng = np.random.default_rng(3)
        sigma = 0.1
        v = rng.normal(size=(200, 3))
        y = v / np.linalg.norm(v, axis=1, keepdims=True)
        m = EmpiricalConvolvedModel(y, sigma)
        x = y[:20] + rng.normal(size=(20, 3)) * sigma
        alpha = 0.1 * sigma ** 2
        for _ in range(10):
            nxt = x + alpha * empirical_score(m, x)
            assert np.all(empirical_log_density(m, nxt) > empirical_log_density(m, x))
            x = nxt

    def test_dense_plane_converges_to_plane_score(self):
        # Jittered 100x100 grid on the unit square; sigma spans three cells.
        sigma = 0.03
        rng = np.random.default_rng(4)
        cells = np.stack(np.meshgrid(np.arange(100), np.arange(100)), -1).reshape(-1, 2)
        xy = (cells + rng.random(cells.shape)) / 100 - 0.5
        m = EmpiricalConvolvedModel(np.column_stack([xy, np.zeros(len(xy))]), sigma)
        q = np.column_stack([(rng.random((40, 2)) - 0.5) * 0.2, np.linspace(-2 * sigma, 2 * sigma, 40)])
        q = q[np.abs(q[:, 2]) > 0.1 * sigma]
        emp, ref = empirical_score(m, q), plane_score(PlaneGaussianModel(sigma), q)
        rel = np.linalg.norm(emp - ref, axis=1) / np.linalg.norm(ref, axis=1)
        assert rel.max() < 0.10


def test_local_score_matches_full():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(3000, 3))
    m = EmpiricalConvolvedModel(v / np.linalg.norm(v, axis=1, keepdims=True), 0.02)
    near = m.support[:200] + rng.normal(scale=0.02, size=(200, 3))
    far = rng.normal(size=(20, 3)) * 0.1  # deep inside: many terms tie, forcing the fallback
    for q, k in ((near, 64), (far, 8), (near, 3000)):
        full = empirical_score(m, q)
        got = LocalEmpiricalScore(m, k)(q)
        np.testing.assert_allclose(got, full, rtol=1e-9, atol=1e-9 * np.abs(full).max())


class TestPlane:
    m = PlaneGaussianModel(0.1)

    def test_mode(self):
        assert np.array_equal(plane_score(self.m, np.array([0.3, -2.0, 0.0])), np.zeros(3))

    def test_one_sigma(self):
        s = plane_score(self.m, np.array([0.0, 0.0, 0.1]))
        assert np.isclose(np.linalg.norm(s), 1 / 0.1)
        assert s[2] < 0

    def test_sign_and_norm(self):
        x = np.random.default_rng(5).normal(size=(100, 3))
        s = plane_score(self.m, x)
        assert np.all(np.sign(s[:, 2]) == -np.sign(x[:, 2]))
        n = normalized_plane_score(self.m, x)
        np.testing.assert_array_equal(np.linalg.norm(n, axis=1), np.abs(x[:, 2]))

    def test_normalized_examples(self):
        np.testing.assert_array_equal(normalized_plane_score(self.m, np.array([0.0, 0, 1])), [0, 0, -1])
        np.testing.assert_array_equal(normalized_plane_score(self.m, np.array([5.0, 1, 0])), 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            PlaneGaussianModel(0)
