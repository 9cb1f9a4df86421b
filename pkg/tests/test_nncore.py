import math
import struct

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from draftrefine import nncore as F
from oracles import adam_scalar, central_difference, relative_error


def rand(*shape, seed=0, requires_grad=True):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=F.DTYPE).requires_grad_(requires_grad)


def check_grad(fn, *inputs, tol=1e-3):
    """Autograd vs central differences for ``sum(w * fn(*inputs))``."""
    out = fn(*inputs)
    w = rand(*out.shape, seed=99, requires_grad=False)
    loss = lambda: (w * fn(*inputs)).sum()  # noqa: E731
    grads = torch.autograd.grad(loss(), inputs)
    for x, g in zip(inputs, grads):
        with torch.no_grad():
            fd = central_difference(loss, x)
        assert relative_error(g, fd) < tol


class TestForwardOps:
    def test_softmax_uniform(self):
        assert F.softmax(F.tensor([0.0, 0.0, 0.0])).tolist() == pytest.approx([1 / 3] * 3)

    def test_sigmoid_zero(self):
        assert float(F.sigmoid(F.tensor(0.0))) == 0.5

    def test_layer_norm_hand_value(self):
        out = F.layer_norm(F.tensor([1.0, 2.0, 3.0]))
        assert out.tolist() == pytest.approx([-1.2247, 0.0, 1.2247], abs=1e-3)

    @given(st.integers(0, 10_000))
    def test_layer_norm_moments(self, seed):
        y = F.layer_norm(rand(3, 8, seed=seed, requires_grad=False))
        assert torch.allclose(y.mean(-1), torch.zeros(3, dtype=F.DTYPE), atol=1e-9)
        assert torch.allclose(((y - y.mean(-1, keepdim=True)) ** 2).mean(-1), torch.ones(3, dtype=F.DTYPE), atol=1e-4)

    @given(st.integers(0, 10_000))
    def test_softmax_rows_on_simplex(self, seed):
        p = F.softmax(rand(4, 7, seed=seed, requires_grad=False) * 10)
        assert bool((p >= 0).all())
        assert torch.allclose(p.sum(-1), torch.ones(4, dtype=F.DTYPE))

    @pytest.mark.parametrize(
        "op, a, b",
        [
            ("matmul", (2, 3), (4, 5)),
            ("add", (2, 3), (4, 5)),
            ("concat", (2, 3), (4, 5)),
        ],
    )
    def test_shape_errors_name_op_and_shapes(self, op, a, b):
        fn = {"matmul": F.matmul, "add": F.add, "concat": lambda x, y: F.concat([x, y], axis=-1)}[op]
        with pytest.raises(F.ShapeError, match=rf"{op}.*\({a[0]}, {a[1]}\).*\({b[0]}, {b[1]}\)"):
            fn(torch.zeros(*a, dtype=F.DTYPE), torch.zeros(*b, dtype=F.DTYPE))

    def test_masked_mean_ignores_masked_rows(self):
        x = F.tensor([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]])
        mask = torch.tensor([[True, True, False]])
        assert F.masked_mean(x, mask).tolist() == [[2.0, 3.0]]


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_ops_match_finite_differences(self, seed):
        a, b = rand(3, 4, seed=seed), rand(4, 2, seed=seed + 1)
        check_grad(F.matmul, a, b)
        check_grad(F.add, rand(3, 4, seed=seed), rand(4, seed=seed + 2))
        check_grad(lambda x: F.scale(x, 2.5), rand(5, seed=seed))
        # keep relu inputs away from the kink
        x = rand(6, seed=seed)
        with torch.no_grad():
            x += torch.sign(x) * 0.1
        check_grad(F.relu, x)
        check_grad(F.sigmoid, rand(5, seed=seed))
        check_grad(F.softmax, rand(3, 5, seed=seed))
        check_grad(F.log_softmax, rand(3, 5, seed=seed))
        check_grad(lambda x: F.mean(x, axis=0), rand(3, 4, seed=seed))
        check_grad(lambda x, y: F.concat([x, y], axis=0), rand(2, 3, seed=seed), rand(1, 3, seed=seed + 3))
        check_grad(F.layer_norm, rand(2, 6, seed=seed), rand(6, seed=seed + 4), rand(6, seed=seed + 5))

    def test_backward_outer_product(self):
        x = F.tensor([1.0, -2.0, 0.5])
        w = rand(2, 3)
        loss = F.matmul(w, x).sum()
        store = F.ParamStore({"w": w})
        F.backward(loss, store)
        assert torch.allclose(w.grad, torch.ones(2, 1, dtype=F.DTYPE) * x)

    def test_unreached_param_gets_zero(self):
        w, u = rand(2), rand(3)
        store = F.ParamStore({"w": w, "u": u})
        F.backward(w.sum(), store)
        assert u.grad is not None and bool((u.grad == 0).all())

    def test_two_paths_accumulate(self):
        w = rand(3)
        loss_fn = lambda: (F.sigmoid(w) * w).sum() + F.scale(w, 3.0).sum()  # noqa: E731
        F.backward(loss_fn(), F.ParamStore({"w": w}))
        with torch.no_grad():
            fd = central_difference(loss_fn, w)
        assert relative_error(w.grad, fd) < 1e-3

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            F.backward(rand(3).sum(0, keepdim=True).expand(2))


class TestAdam:
    def test_first_step_hand_value(self):
        p = torch.zeros(1, dtype=F.DTYPE, requires_grad=True)
        store = F.ParamStore({"p": p})
        p.grad = torch.ones(1, dtype=F.DTYPE)
        F.adam_step(store, F.AdamState(lr=1e-4))
        assert float(p.detach()) == pytest.approx(-1e-4, rel=1e-6)
        assert p.grad is None

    def test_matches_scalar_oracle(self):
        grads = [0.3, -1.2, 2.0, 0.05, -0.4]
        p = torch.full((1,), 0.7, dtype=F.DTYPE, requires_grad=True)
        store, state = F.ParamStore({"p": p}), F.AdamState(lr=1e-2)
        for g in grads:
            p.grad = torch.full((1,), g, dtype=F.DTYPE)
            F.adam_step(store, state)
        assert float(p.detach()) == pytest.approx(adam_scalar(0.7, grads, 1e-2), abs=1e-12)

    def test_frozen_untouched(self):
        p, q = rand(2), rand(2, seed=1)
        store = F.ParamStore({"p": p, "q": q})
        store.freeze(["q"])
        before = q.detach().clone()
        p.grad, q.grad = torch.ones(2, dtype=F.DTYPE), torch.ones(2, dtype=F.DTYPE)
        state = F.AdamState(lr=0.1)
        F.adam_step(store, state)
        assert torch.equal(q.detach(), before)
        assert "q" not in state.exp_avg

    def test_zero_grad_no_change(self):
        p = rand(3)
        before = p.detach().clone()
        p.grad = torch.zeros(3, dtype=F.DTYPE)
        F.adam_step(F.ParamStore({"p": p}), F.AdamState(lr=0.1))
        assert torch.equal(p.detach(), before)

    def test_missing_grad_errors(self):
        with pytest.raises(ValueError, match="no gradient"):
            F.adam_step(F.ParamStore({"p": rand(2)}), F.AdamState(lr=0.1))

    def test_deterministic(self):
        def run():
            p = rand(4, seed=5)
            store, state = F.ParamStore({"p": p}), F.AdamState(lr=1e-2)
            for i in range(3):
                p.grad = rand(4, seed=10 + i, requires_grad=False)
                F.adam_step(store, state)
            return p.detach()

        assert torch.equal(run(), run())


class TestDropout:
    def test_rate_zero_identity(self):
        x = rand(5, requires_grad=False)
        assert F.dropout(x, 0.0, True) is x

    def test_inference_identity(self):
        x = rand(5, requires_grad=False)
        assert torch.equal(F.dropout(x, 0.5, False), x)

    def test_keep_fraction(self):
        x = torch.ones(20_000, dtype=F.DTYPE)
        y = F.dropout(x, 0.2, True, torch.Generator().manual_seed(0))
        assert float((y != 0).to(F.DTYPE).mean()) == pytest.approx(0.8, abs=0.02)
        assert set(y.unique().tolist()) <= {0.0, 1.25}

    def test_rate_validated(self):
        with pytest.raises(ValueError):
            F.dropout(torch.ones(2, dtype=F.DTYPE), 1.0, True)


class TestInit:
    def test_xavier_bound(self):
        w = F.xavier_uniform(30, 50, torch.Generator().manual_seed(0))
        assert float(w.abs().max()) <= math.sqrt(6 / 80)

    def test_embedding_scale(self):
        e = F.embedding_normal(400, 64, torch.Generator().manual_seed(0))
        assert float(e.std()) == pytest.approx(64**-0.5, rel=0.05)


class TestCheckpoint:
    def test_roundtrip_and_format(self, tmp_path):
        params = {"b.w": rand(2, 3, requires_grad=False), "a": rand(4, seed=1, requires_grad=False)}
        F.save_checkpoint(tmp_path, params, {"config_hash": "abc", "optimizer_steps": 7})
        raw = (tmp_path / "params.bin").read_bytes()
        assert raw[:8] == b"DRAFTCKP"
        assert struct.unpack_from("<II", raw, 8) == (1, 2)
        # names are sorted, so "a" comes first
        name_len = struct.unpack_from("<I", raw, 16)[0]
        assert raw[20 : 20 + name_len] == b"a"
        back, manifest = F.load_checkpoint(tmp_path)
        assert manifest["config_hash"] == "abc" and manifest["optimizer_steps"] == 7
        for k, v in params.items():
            assert torch.equal(back[k], v)

    def test_bad_header(self, tmp_path):
        (tmp_path / "params.bin").write_bytes(b"NOTACKPT")
        with pytest.raises(ValueError):
            F.load_checkpoint(tmp_path)

    def test_checksum_tracks_values(self):
        p = rand(3)
        store = F.ParamStore({"p": p})
        before = store.checksum()
        with torch.no_grad():
            p[0] += 1e-9
        assert store.checksum() != before
