import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acmnet.errors import DegenerateBatchError, DomainError, ParameterError
from acmnet.loss import (
    ContrastiveConfig,
    DenominatorMode,
    cosine_similarity,
    ntxent_loss,
    rotation_ce_loss,
    total_loss,
)

PAPER = DenominatorMode.PAPER_EXCLUDES_SELF_IMAGE
SIMCLR = DenominatorMode.SIMCLR_STANDARD


def ntxent_oracle(z, tau, mode=PAPER):
    """Term-by-term evaluation of the two-view NT-Xent sum with plain floats."""
    n = len(z) // 2

    def s(a, b):
        return sum(x * y for x, y in zip(a, b)) / (
            math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))
        )

    def view(i, j):
        return z[2 * i + j]

    total = 0.0
    for i in range(n):
        for a, b in ((0, 1), (1, 0)):
            num = math.exp(s(view(i, a), view(i, b)) / tau)
            den = 0.0
            for k in range(n):
                for j in (0, 1):
                    if mode is PAPER and k == i:
                        continue
                    if mode is SIMCLR and k == i and j == a:
                        continue
                    den += math.exp(s(view(i, a), view(k, j)) / tau)
            total += -math.log(num / den)
    return total / (2 * n)


def finite_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestCosine:
    def test_self_similarity(self):
        assert cosine_similarity([3.0, -4.0, 1.0], [3.0, -4.0, 1.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DomainError):
            cosine_similarity([0, 0], [1, 0])

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, a, b, c):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-12)
        assert cosine_similarity(c * a, b) == pytest.approx(cosine_similarity(a, b), abs=1e-9)


class TestNtXent:
    @pytest.mark.parametrize("tau", [0.01, 0.5, 3.0])
    def test_identical_descriptors_give_ln2(self, tau):
        assert ntxent_loss(np.ones((4, 5)), ContrastiveConfig(tau)) == pytest.approx(math.log(2), abs=1e-9)

    def test_orthogonal_pairs(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        assert ntxent_loss(z, ContrastiveConfig(1.0)) == pytest.approx(math.log(2) - 1, abs=1e-9)
        assert ntxent_oracle(z.tolist(), 1.0) == pytest.approx(math.log(2) - 1, abs=1e-12)

    @pytest.mark.parametrize("mode", [PAPER, SIMCLR])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, mode, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2 * (2 + seed), 6))
        tau = [0.05, 0.1, 0.5, 1.0, 0.01][seed]
        got = ntxent_loss(z, ContrastiveConfig(tau, mode))
        assert got == pytest.approx(ntxent_oracle(z.tolist(), tau, mode), rel=1e-9, abs=1e-9)

    def test_simclr_mode_is_never_negative(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(8, 4))
        assert ntxent_loss(z, ContrastiveConfig(0.1, SIMCLR)) > 0

    @pytest.mark.parametrize("mode", [PAPER, SIMCLR])
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, mode, seed):
        rng = np.random.default_rng(100 + seed)
        z = rng.normal(size=(6, 5))
        cfg = ContrastiveConfig(0.2, mode)
        _, g = ntxent_loss(z, cfg, return_grad=True)
        fd = finite_diff(lambda x: ntxent_loss(x, cfg), z)
        assert max_rel_err(g, fd) < 1e-4

    def test_small_temperature_is_finite(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(64, 16))
        loss, g = ntxent_loss(z, ContrastiveConfig(0.01), return_grad=True)
        assert np.isfinite(loss) and np.all(np.isfinite(g))

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError, match="N >= 2"):
            ntxent_loss(np.ones((2, 3)))

    def test_zero_descriptor(self):
        z = np.ones((4, 3))
        z[2] = 0
        with pytest.raises(DomainError):
            ntxent_loss(z)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            ContrastiveConfig(0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0), st.integers(2, 5))
    def test_invariances(self, seed, scale, n):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2 * n, 4))
        cfg = ContrastiveConfig(0.1)
        base = ntxent_loss(z, cfg)
        # scaling one descriptor
        z2 = z.copy()
        z2[rng.integers(2 * n)] *= scale
        assert ntxent_loss(z2, cfg) == pytest.approx(base, rel=1e-9, abs=1e-9)
        # relabelling images
        perm = rng.permutation(n)
        z3 = z.reshape(n, 2, -1)[perm].reshape(2 * n, -1)
        assert ntxent_loss(z3, cfg) == pytest.approx(base, rel=1e-9, abs=1e-9)
        # swapping the two views of every image
        z4 = z.reshape(n, 2, -1)[:, ::-1].reshape(2 * n, -1)
        assert ntxent_loss(z4, cfg) == pytest.approx(base, rel=1e-9, abs=1e-9)


class TestRotationCE:
    def test_uniform_logits(self):
        assert rotation_ce_loss(np.zeros((4, 4)), np.arange(4)) == pytest.approx(4 * math.log(4), abs=1e-9)

    def test_uniform_logits_mean_reduction(self):
        got = rotation_ce_loss(np.full((8, 4), 2.5), np.tile(np.arange(4), 2), reduction="mean")
        assert got == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_logits_are_stable(self):
        labels = np.array([0, 1, 2, 3])
        logits = np.zeros((4, 4))
        logits[np.arange(4), labels] = 1000.0
        loss, g = rotation_ce_loss(logits, labels, return_grad=True)
        assert 0 <= loss < 1e-6
        assert np.all(np.isfinite(g))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(8, 4)) * 3
        labels = rng.integers(0, 4, size=8)
        _, g = rotation_ce_loss(logits, labels, return_grad=True)
        fd = finite_diff(lambda x: rotation_ce_loss(x, labels), logits)
        assert max_rel_err(g, fd) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            rotation_ce_loss(np.zeros((2, 4)), np.array([0, 4]))

    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(8, 4)) * 20
        assert rotation_ce_loss(logits, rng.integers(0, 4, 8)) >= 0


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss(0.5, 2.0, 1.0) == 2.5

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_zero_weight_disables_geometry(self, x, y):
        assert total_loss(x, y, 0.0) == x

    def test_analytic_sum(self):
        got = total_loss(math.log(2), 4 * math.log(4), 1.0)
        assert got == pytest.approx(6.23833, abs=1e-5)
        assert got == pytest.approx(math.log(2) + 4 * math.log(4), abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(DomainError):
            total_loss(float("nan"), 1.0, 1.0)
        with pytest.raises(DomainError):
            total_loss(1.0, float("inf"), 1.0)
