import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from draftrefine import nncore as F
from draftrefine.evaluator import circle_loss, cosine, pool_and_project, quality_score, softplus
from draftrefine.transformer import EvaluatorHead
from oracles import central_difference, relative_error


def head(d=4, seed=0):
    return EvaluatorHead(d, torch.Generator().manual_seed(seed))


def vec(*xs):
    return F.tensor(list(xs))


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=F.DTYPE)


class TestPooling:
    def test_single_row_is_its_own_mean(self):
        h = head()
        x = rand(1, 1, 4)
        assert torch.allclose(pool_and_project(x, torch.tensor([[True]]), h), h(x[:, 0]))

    def test_identity_head_reproduces_mean(self):
        h = head()
        with torch.no_grad():
            h.inner.weight.copy_(torch.eye(4, dtype=F.DTYPE))
            h.outer.weight.copy_(torch.eye(4, dtype=F.DTYPE))
        x = rand(1, 3, 4).abs()  # nonnegative, so ReLU passes it through
        mask = torch.tensor([[True, True, False]])
        assert torch.allclose(pool_and_project(x, mask, h), x[:, :2].mean(1))

    def test_pad_rows_ignored(self):
        h = head()
        x, y = rand(1, 3, 4), rand(1, 3, 4)
        y[:, :2] = x[:, :2]
        mask = torch.tensor([[True, True, False]])
        assert torch.equal(pool_and_project(x, mask, h), pool_and_project(y, mask, h))

    def test_all_pad_rejected(self):
        with pytest.raises(ValueError):
            pool_and_project(rand(1, 2, 4), torch.tensor([[False, False]]), head())

    @given(st.permutations(range(5)))
    def test_row_permutation_invariant(self, perm):
        h = head()
        x = rand(1, 5, 4, seed=3)
        mask = torch.ones(1, 5, dtype=torch.bool)
        assert torch.allclose(pool_and_project(x, mask, h), pool_and_project(x[:, list(perm)], mask, h), atol=1e-12)


class TestQualityScore:
    def test_identical(self):
        assert quality_score(vec(1, 2, 3), vec(1, 2, 3)) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert quality_score(vec(1, 0), vec(0, 5)) == 0.0

    def test_opposite(self):
        assert quality_score(vec(1, -2), vec(-1, 2)) == pytest.approx(-1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            quality_score(vec(0, 0), vec(1, 2))

    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, c):
        v = rand(6, seed=seed)
        assert quality_score(v, c * v) == pytest.approx(1.0)

    @given(st.integers(0, 10_000))
    def test_bounded(self, seed):
        q = quality_score(rand(5, seed=seed), rand(5, seed=seed + 1))
        assert -1.0 <= q <= 1.0


class TestCircleLoss:
    def test_equal_cosines(self):
        v = vec(1, 2)
        assert float(circle_loss(v, v, v, 10.0)) == pytest.approx(math.log(2))

    def test_generated_worse_by_half(self):
        code, gt, gen = vec(1, 0), vec(1, 0), vec(0.5, math.sqrt(0.75))  # cos 1 vs cos 0.5
        assert float(circle_loss(code, gen, gt, 10.0)) == pytest.approx(0.0067, abs=1e-4)
        assert float(circle_loss(code, gen, gt, 10.0)) == pytest.approx(math.log1p(math.exp(-5)))

    def test_large_argument_is_finite_and_asymptotic(self):
        assert float(softplus(F.tensor(800.0))) == pytest.approx(800.0)
        assert float(softplus(F.tensor(-800.0))) == pytest.approx(0.0, abs=1e-300)
        # lambda * delta = 2000 * 2
        loss = circle_loss(vec(1, 0), vec(1, 0), vec(-1, 0), 2000.0)
        assert float(loss) == pytest.approx(4000.0)

    def test_decreasing_in_truth_similarity(self):
        code, gen = vec(1, 0), vec(0.6, 0.8)
        losses = [float(circle_loss(code, gen, vec(math.cos(a), math.sin(a)), 10.0)) for a in (2.0, 1.0, 0.5, 0.0)]
        assert all(x > y for x, y in zip(losses, losses[1:]))

    def test_lambda_validated(self):
        with pytest.raises(ValueError):
            circle_loss(vec(1), vec(1), vec(1), 0.0)

    @given(st.integers(0, 10_000))
    def test_positive(self, seed):
        a, b, c = rand(4, seed=seed), rand(4, seed=seed + 1), rand(4, seed=seed + 2)
        assert float(circle_loss(a, b, c, 10.0)) > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        vs = [rand(5, seed=seed + i).requires_grad_(True) for i in range(3)]
        loss = lambda: circle_loss(*vs, 3.0)  # noqa: E731
        grads = torch.autograd.grad(loss(), vs)
        for v, g in zip(vs, grads):
            with torch.no_grad():
                assert relative_error(g, central_difference(loss, v)) < 1e-3

    def test_batched_rows(self):
        a = rand(3, 4)
        out = circle_loss(a, rand(3, 4, seed=1), rand(3, 4, seed=2), 10.0)
        assert out.shape == (3,)
        assert torch.allclose(cosine(a, a), torch.ones(3, dtype=F.DTYPE))
