import math

import numpy as np
import pytest

from conftest import make_rng
from oracles import dense_q_from_groups
from mismatchglm.baselines import (
    EstimatingEquationFit,
    ExchangeOperator,
    _newton_root,
    chambers_equation,
    fit_chambers,
    fit_ll,
    ll_equation,
)
from mismatchglm.blocks import BlockPartition
from mismatchglm.estimators import MergedDataset, fit_glm
from mismatchglm.families import Family
from mismatchglm.simlab import generate_permutation_blocks


def _random_partition(rng, n):
    labels = rng.integers(0, max(2, n // 3), size=n)
    return BlockPartition.from_labels(labels)


class TestExchangeOperator:
    def test_dense_matches_independent_construction(self, rng):
        for n in (5, 9, 12):
            blocks = _random_partition(rng, n)
            q = ExchangeOperator(blocks)
            oracle = dense_q_from_groups(n, [g.tolist() for g in blocks.groups])
            assert np.allclose(q.dense(), oracle, atol=0)

    def test_projection_identities(self, rng):
        for n in (4, 8, 12):
            blocks = _random_partition(rng, n)
            q = ExchangeOperator(blocks).dense()
            assert np.allclose(q, q.T, atol=1e-15)
            assert np.allclose(q @ q, q, atol=1e-12)

    def test_q_absorbs_block_permutations(self, rng):
        for n in (6, 10, 12):
            blocks = _random_partition(rng, n)
            q = ExchangeOperator(blocks).dense()
            for _ in range(5):
                pi = generate_permutation_blocks(blocks, int(rng.integers(1 << 30)))
                p = np.zeros((n, n))
                p[np.arange(n), pi] = 1.0
                assert np.allclose(q.T @ p, q, atol=1e-12)

    def test_apply_matches_dense(self, rng):
        blocks = _random_partition(rng, 11)
        q = ExchangeOperator(blocks)
        v = rng.normal(size=11)
        m = rng.normal(size=(11, 3))
        assert np.allclose(q.apply(v), q.dense() @ v, atol=1e-12)
        assert np.allclose(q.apply(m), q.dense() @ m, atol=1e-12)

    def test_expected_permutation_matrix_is_q(self):
        rng = make_rng(271)
        blocks = BlockPartition.from_groups(7, [[0, 1, 2], [3, 4, 5, 6]])
        acc = np.zeros((7, 7))
        draws = 10000
        for _ in range(draws):
            pi = generate_permutation_blocks(blocks, rng)
            p = np.zeros((7, 7))
            p[np.arange(7), pi] = 1.0
            acc += p
        assert np.max(np.abs(acc / draws - ExchangeOperator(blocks).dense())) < 0.02


class TestEquations:
    def test_noiseless_root(self):
        # "noiseless" for these equations is y at its model expectation Q mu*
        fam = Family.poisson()
        rng = make_rng(277)
        X = np.hstack([np.ones((9, 1)), rng.normal(size=(9, 2))])
        beta = np.array([1.0, 0.3, -0.2])
        blocks = BlockPartition.from_groups(9, [[0, 1, 2], [3, 4, 5], [6, 7, 8]])
        q = ExchangeOperator(blocks)
        mu = np.asarray(fam.mean(X @ beta))
        y = q.apply(mu)
        assert np.max(np.abs(ll_equation(fam, X, y, q, beta))) < 1e-10
        assert np.max(np.abs(chambers_equation(fam, X, y, q, beta))) < 1e-10
        # LL is also exact for raw means: Q'(mu - Q mu) vanishes identically
        assert np.max(np.abs(ll_equation(fam, X, mu, q, beta))) < 1e-10

    def test_singleton_blocks_reduce_to_glm_score(self):
        fam = Family.poisson()
        rng = make_rng(281)
        X = np.hstack([np.ones((8, 1)), rng.normal(size=(8, 2))])
        y = fam.sample(X @ np.array([1.0, 0.2, 0.1]), rng)
        q = ExchangeOperator(BlockPartition.singletons(8))
        beta = np.array([0.8, 0.1, 0.0])
        score = X.T @ (y - np.asarray(fam.mean(X @ beta)))
        assert np.allclose(ll_equation(fam, X, y, q, beta), score, atol=1e-12)
        assert np.allclose(chambers_equation(fam, X, y, q, beta), score, atol=1e-12)

    def test_dense_oracle_two_blocks(self):
        fam = Family.gaussian()
        rng = make_rng(283)
        X = np.hstack([np.ones((6, 1)), rng.normal(size=(6, 2))])
        y = rng.normal(size=6)
        groups = [[0, 1, 2], [3, 4, 5]]
        q = ExchangeOperator(BlockPartition.from_groups(6, groups))
        beta = rng.normal(size=3)
        qd = dense_q_from_groups(6, groups)
        mu = np.asarray(fam.mean(X @ beta))
        expected_ll = X.T @ qd.T @ (y - qd @ mu)
        expected_ch = X.T @ (y - qd @ mu)
        assert np.allclose(ll_equation(fam, X, y, q, beta), expected_ll, atol=1e-12)
        assert np.allclose(chambers_equation(fam, X, y, q, beta), expected_ch, atol=1e-12)


@pytest.fixture(scope="module")
def poisson_block_mc():
    """200 replications of the Poisson block scenario (K=100, size 5)."""
    fam = Family.poisson()
    rng = make_rng(293)
    n, size, d = 500, 5, 3
    blocks = BlockPartition.from_labels(np.arange(n) // size)
    beta_star = np.array([1.0, 0.4, -0.3])
    ll_betas, ch_betas = [], []
    for _ in range(200):
        X = np.hstack([np.ones((n, 1)), rng.normal(size=(n, d - 1))])
        y_star = fam.sample(X @ beta_star, rng)
        pi = generate_permutation_blocks(blocks, rng)
        data = MergedDataset(X=X, y=y_star[pi], blocks=blocks)
        ll = fit_ll(fam, data)
        ch = fit_chambers(fam, data)
        if ll.converged:
            ll_betas.append(ll.beta)
        if ch.converged:
            ch_betas.append(ch.beta)
    return beta_star, np.array(ll_betas), np.array(ch_betas)


class TestFitLL:
    def test_gaussian_newton_equals_closed_form(self):
        fam = Family.gaussian(2.5)
        rng = make_rng(307)
        n = 30
        X = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 2))])
        groups = [list(range(i, min(i + 3, n))) for i in range(0, n, 3)]
        blocks = BlockPartition.from_groups(n, groups)
        y = rng.normal(size=n)
        data = MergedDataset(X=X, y=y, blocks=blocks)
        fit = fit_ll(fam, data)

        qd = dense_q_from_groups(n, groups)
        closed = np.linalg.solve(X.T @ qd @ X, X.T @ qd @ y)
        assert np.max(np.abs(fit.beta - closed)) < 1e-10
        expected_cov = 2.5 * np.linalg.inv(X.T @ qd @ X)
        assert np.max(np.abs(fit.covariance - expected_cov)) < 1e-10

        # the generic damped-Newton path lands on the same root
        q = ExchangeOperator(blocks)
        beta_newton, norm, _, conv = _newton_root(
            lambda b: ll_equation(fam, X, y, q, b),
            lambda b: X.T @ qd @ X,
            np.zeros(3),
        )
        assert conv and np.max(np.abs(beta_newton - closed)) < 1e-10

    def test_equation_residual_small_when_converged(self, poisson_block_mc):
        fam = Family.poisson()
        rng = make_rng(311)
        n = 60
        blocks = BlockPartition.from_labels(np.arange(n) // 4)
        X = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 1))])
        y = fam.sample(X @ np.array([1.0, 0.3]), rng)
        data = MergedDataset(X=X, y=y, blocks=blocks)
        fit = fit_ll(fam, data)
        assert fit.converged
        assert fit.equation_residual < 1e-8
        q = ExchangeOperator(blocks)
        assert np.max(np.abs(ll_equation(fam, X, y, q, fit.beta))) < 1e-8

    def test_poisson_unbiased_over_blocks(self, poisson_block_mc):
        beta_star, ll_betas, _ = poisson_block_mc
        assert ll_betas.shape[0] >= 190
        mean = ll_betas.mean(axis=0)
        se = ll_betas.std(axis=0, ddof=1) / math.sqrt(ll_betas.shape[0])
        assert np.all(np.abs(mean - beta_star) <= 3.0 * se)

    def test_covariance_symmetric_psd(self, poisson_block_mc):
        fam = Family.poisson()
        rng = make_rng(313)
        n = 60
        blocks = BlockPartition.from_labels(np.arange(n) // 5)
        X = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 1))])
        y = fam.sample(X @ np.array([1.0, 0.3]), rng)
        fit = fit_ll(fam, MergedDataset(X=X, y=y, blocks=blocks))
        cov = fit.covariance
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(cov)) > -1e-8


class TestFitChambers:
    def test_singleton_blocks_match_plain_glm(self):
        fam = Family.poisson()
        rng = make_rng(317)
        X = np.hstack([np.ones((40, 1)), rng.normal(size=(40, 2))])
        y = fam.sample(X @ np.array([1.0, 0.2, -0.1]), rng)
        data = MergedDataset(X=X, y=y, blocks=BlockPartition.singletons(40))
        fit = fit_chambers(fam, data)
        glm = fit_glm(fam, X, y)
        assert fit.converged
        assert np.max(np.abs(fit.beta - glm)) < 1e-8

    def test_covariance_flags_present(self):
        fam = Family.gaussian()
        rng = make_rng(331)
        X = np.hstack([np.ones((12, 1)), rng.normal(size=(12, 1))])
        y = rng.normal(size=12)
        data = MergedDataset(X=X, y=y, blocks=BlockPartition.from_labels(np.arange(12) // 3))
        fit = fit_chambers(fam, data)
        assert "xi_term_omitted" in fit.covariance_flags
        assert fit.intercept_only_deviance is not None

    def test_higher_dispersion_than_ll_gaussian(self):
        # trace of the empirical covariance: Chambers >= LL
        fam = Family.gaussian()
        rng = make_rng(337)
        n, K = 300, 30
        blocks = BlockPartition.from_labels(np.arange(n) // (n // K))
        beta_star = np.array([0.5, 1.0, -1.0])
        ll_list, ch_list = [], []
        for _ in range(200):
            X = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 2))])
            y_star = fam.sample(X @ beta_star, rng)
            pi = generate_permutation_blocks(blocks, rng)
            data = MergedDataset(X=X, y=y_star[pi], blocks=blocks)
            ll_list.append(fit_ll(fam, data).beta)
            ch = fit_chambers(fam, data)
            if ch.converged:
                ch_list.append(ch.beta)
        ll_cov = np.cov(np.array(ll_list).T)
        ch_cov = np.cov(np.array(ch_list).T)
        assert np.trace(ch_cov) >= np.trace(ll_cov)

    def test_poisson_blocks_dispersion(self, poisson_block_mc):
        _, ll_betas, ch_betas = poisson_block_mc
        if ch_betas.shape[0] >= 50:
            assert np.trace(np.cov(ch_betas.T)) >= np.trace(np.cov(ll_betas.T))
