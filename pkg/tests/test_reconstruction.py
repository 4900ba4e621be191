import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import t64
from lfs_fewshot import numerics as nx
from lfs_fewshot.errors import DimensionError, SingularityError
from lfs_fewshot.reconstruction import (
    ReconstructionHead,
    bifrn_logits,
    bifrn_mutual_reconstruct,
    euclidean_recon_distance,
    frn_logits,
    query_from_support_residuals,
    ridge_reconstruct,
    support_from_query_residuals,
)
from ridge_oracle import ridge_by_descent


class TestRidge:
    def test_exact_representation(self, rng):
        basis = rng.normal(size=(4, 8))
        target = basis[[2]]
        res = ridge_reconstruct(t64(target), t64(basis), 0.0)
        np.testing.assert_allclose(res.recon.numpy(), target, atol=1e-12)
        assert res.residual.item() < 1e-20

    def test_large_penalty_limit(self, rng):
        target, basis = rng.normal(size=(3, 5)), rng.normal(size=(6, 5))
        res = ridge_reconstruct(t64(target), t64(basis), 1e12)
        assert np.abs(res.weights.numpy()).max() < 1e-10
        assert res.residual.item() == pytest.approx(np.mean(target ** 2), rel=1e-9)

    def test_matches_descent_oracle(self, rng):
        target, basis = rng.normal(size=(5, 8)), rng.normal(size=(10, 8))
        res = ridge_reconstruct(t64(target), t64(basis), 0.1)
        _, recon, residual = ridge_by_descent(target, basis, 0.1)
        np.testing.assert_allclose(res.recon.numpy(), recon, atol=1e-5)
        assert abs(res.residual.item() - residual) < 1e-5

    def test_residual_definition(self, rng):
        target, basis = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        res = ridge_reconstruct(t64(target), t64(basis), 0.3)
        assert abs(res.residual.item() - np.mean((target - res.recon.numpy()) ** 2)) < 1e-12

    def test_singular(self, rng):
        row = rng.normal(size=(1, 4))
        with pytest.raises(SingularityError):
            ridge_reconstruct(t64(row), t64(np.vstack([row, row])), 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ridge_reconstruct(torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_residual_nondecreasing_in_lambda(self, t, n, d, seed):
        r = np.random.default_rng(seed)
        target, basis = t64(r.normal(size=(t, d))), t64(r.normal(size=(n, d)))
        lams = [1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0]
        res = [ridge_reconstruct(target, basis, lam).residual.item() for lam in lams]
        assert all(b >= a - 1e-12 for a, b in zip(res, res[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_basis_augmentation_never_hurts(self, t, n, extra, d, seed):
        r = np.random.default_rng(seed)
        target, basis = r.normal(size=(t, d)), r.normal(size=(n, d))
        bigger = np.vstack([basis, r.normal(size=(extra, d))])
        small = ridge_reconstruct(t64(target), t64(basis), 1e-8).residual.item()
        large = ridge_reconstruct(t64(target), t64(bigger), 1e-8).residual.item()
        assert large <= small + 1e-9


class TestDistance:
    def test_identical(self, rng):
        x = t64(rng.normal(size=(3, 4)))
        assert euclidean_recon_distance(x, x).item() == 0.0

    def test_unit_offset(self, rng):
        x = t64(rng.normal(size=(3, 4)))
        assert euclidean_recon_distance(x + 1, x).item() == pytest.approx(1.0, abs=1e-15)

    def test_summation(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        expected = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(4)) / 12
        assert euclidean_recon_distance(t64(a), t64(b)).item() == pytest.approx(expected, abs=1e-14)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            euclidean_recon_distance(torch.zeros(2, 3), torch.zeros(3, 2))


def _pools(r, n_query=4, n_class=3, shot=2, tokens=4, d=8):
    return t64(r.normal(size=(n_query, tokens, d))), t64(r.normal(size=(n_class, shot * tokens, d)))


class TestFRN:
    def test_zero_residual_dominates(self, rng):
        supports = t64(rng.normal(size=(3, 4, 8)))
        logits = frn_logits(supports[1:2], supports, alpha=-20.0, beta=0.0)
        assert logits.argmax().item() == 1
        assert logits[0, 1] > logits[0, 0] and logits[0, 1] > logits[0, 2]

    def test_identical_classes_tie(self, rng):
        queries, supports = _pools(rng)
        supports[2] = supports[0]
        logits = frn_logits(queries, supports, 0.0, 0.0)
        assert torch.equal(logits[:, 0], logits[:, 2])

    def test_orthogonal_subspaces(self, rng):
        d = 8
        basis = np.linalg.qr(rng.normal(size=(d, d)))[0]
        span_a, span_b = basis[:, :4].T, basis[:, 4:].T
        supports = t64(np.stack([rng.normal(size=(4, 4)) @ span_a, rng.normal(size=(4, 4)) @ span_b]))
        q_a = rng.normal(size=(10, 4, 4)) @ span_a
        q_b = rng.normal(size=(10, 4, 4)) @ span_b
        queries = t64(np.concatenate([q_a, q_b]))
        pred = frn_logits(queries, supports, 0.0, 0.0).argmax(dim=1)
        assert pred.tolist() == [0] * 10 + [1] * 10

    def test_matches_per_pair_ridge(self, rng):
        queries, supports = _pools(rng)
        alpha = 0.3
        residuals = query_from_support_residuals(queries, supports, alpha)
        lam = (supports.shape[1] / supports.shape[2]) * np.exp(alpha)
        for i in range(queries.shape[0]):
            for c in range(supports.shape[0]):
                ref = ridge_reconstruct(queries[i], supports[c], lam).residual
                assert abs(residuals[i, c].item() - ref.item()) < 1e-12

    def test_scale_invariance_of_argmax(self, rng):
        queries, supports = _pools(rng)
        a = frn_logits(queries, supports, 0.0, 0.0).argmax(1)
        b = frn_logits(queries, supports, 0.0, 3.7).argmax(1)
        assert torch.equal(a, b)

    def test_class_permutation_equivariance(self, rng):
        queries, supports = _pools(rng, n_class=4)
        perm = torch.tensor([2, 0, 3, 1])
        base = frn_logits(queries, supports, 0.1, 0.2)
        permuted = frn_logits(queries, supports[perm], 0.1, 0.2)
        np.testing.assert_allclose(permuted.numpy(), base[:, perm].numpy(), atol=1e-12)


class TestBiFRN:
    def test_self_reconstruction_zero(self, rng):
        pool = t64(rng.normal(size=(1, 4, 8)))
        d_qs, d_sq = bifrn_mutual_reconstruct(pool, pool, alpha=-30.0)
        assert d_qs.item() < 1e-20 and d_sq.item() < 1e-20

    def test_directions_differ(self, rng):
        queries, supports = _pools(rng)
        d_qs, d_sq = bifrn_mutual_reconstruct(queries, supports, 0.0)
        assert not torch.allclose(d_qs, d_sq)

    def test_directions_are_swapped_ridge(self, rng):
        queries, supports = _pools(rng, n_query=2, n_class=2)
        alpha = -0.4
        d_qs, d_sq = bifrn_mutual_reconstruct(queries, supports, alpha)
        d = queries.shape[-1]
        for i in range(2):
            for c in range(2):
                lam_qs = supports.shape[1] / d * np.exp(alpha)
                lam_sq = queries.shape[1] / d * np.exp(alpha)
                assert abs(d_qs[i, c] - ridge_reconstruct(queries[i], supports[c], lam_qs).residual) < 1e-12
                assert abs(d_sq[i, c] - ridge_reconstruct(supports[c], queries[i], lam_sq).residual) < 1e-12

    def test_degenerate_mixture_is_frn(self, rng):
        queries, supports = _pools(rng)
        assert torch.equal(bifrn_logits(queries, supports, 0.2, 0.5, (1.0, 0.0)),
                           frn_logits(queries, supports, 0.2, 0.5))

    def test_even_mixture(self, rng):
        queries, supports = _pools(rng)
        d_qs, d_sq = bifrn_mutual_reconstruct(queries, supports, 0.0)
        logits = bifrn_logits(queries, supports, 0.0, 0.0, (0.5, 0.5))
        np.testing.assert_allclose(logits.numpy(), (-(d_qs + d_sq) / 2).numpy(), atol=1e-15)

    def test_composition(self, rng):
        queries, supports = _pools(rng)
        alpha, beta, w = 0.7, 1.3, (0.3, 0.7)
        lam_qs = supports.shape[1] / 8 * np.exp(alpha)
        lam_sq = queries.shape[1] / 8 * np.exp(alpha)
        logits = bifrn_logits(queries, supports, alpha, beta, w)
        for i in range(queries.shape[0]):
            for c in range(supports.shape[0]):
                a = ridge_reconstruct(queries[i], supports[c], lam_qs).residual.item()
                b = ridge_reconstruct(supports[c], queries[i], lam_sq).residual.item()
                assert abs(logits[i, c].item() + np.exp(beta) * (w[0] * a + w[1] * b)) < 1e-12


class TestHead:
    @pytest.mark.parametrize("kind", ["frn", "bifrn"])
    def test_gradients(self, rng, kind):
        head = ReconstructionHead(kind, d=6)
        queries = torch.nn.Parameter(t64(rng.normal(size=(3, 4, 6))))
        supports = torch.nn.Parameter(t64(rng.normal(size=(2, 8, 6))))
        labels = torch.tensor([0, 1, 1])
        params = dict(head.named_parameters()) | {"queries": queries, "supports": supports}
        with torch.no_grad():
            head.beta.fill_(1.0)

        def loss():
            return torch.nn.functional.cross_entropy(head(queries, supports), labels)

        assert nx.grad_check(loss, params) < 1e-4

    def test_mixture_normalised(self):
        head = ReconstructionHead("bifrn", d=4)
        with torch.no_grad():
            head.mix.copy_(t64([0.3, -1.2]))
        w = head.mixture()
        assert torch.all(w > 0) and abs(w.sum().item() - 1) < 1e-15

    def test_l2_toggle(self, rng):
        pools = t64(rng.normal(size=(2, 3, 4)) * 5)
        on = ReconstructionHead("frn", d=4).prepare(pools)
        off = ReconstructionHead("frn", d=4, l2_normalize=False).prepare(pools)
        np.testing.assert_allclose(on.norm(dim=-1).numpy(), 1.0, atol=1e-14)
        assert torch.equal(off, pools)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ReconstructionHead("dn4")
