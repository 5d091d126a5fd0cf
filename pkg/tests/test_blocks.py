import numpy as np
import pytest

from lightinspect import blocks as B
from lightinspect import tensor as T
from lightinspect.blocks import AadsSpec, VacSpec

from oracles import check_grad


def rng(seed=0):
    return np.random.default_rng(seed)


def random_vac_params(spec, r):
    return {k: r.normal(size=shape) * 0.3 for k, shape in spec.param_shapes().items()}


class TestVac:
    def test_zero_weights_halve_input(self):
        spec = VacSpec(channels=4, condense_stride=2, embed_groups=2, embed_channels=4)
        params = {k: np.zeros(s) for k, s in spec.param_shapes().items()}
        v = rng(1).normal(size=(2, 4, 8, 8))
        out = B.vac_forward(v, params, spec)
        assert np.allclose(out, 0.5 * v)

    def test_shape_preserved(self):
        spec = VacSpec(channels=16, condense_stride=2, embed_groups=4, embed_channels=8)
        params = random_vac_params(spec, rng(2))
        v = rng(3).normal(size=(2, 16, 56, 56))
        assert B.vac_forward(v, params, spec).shape == v.shape

    def test_indivisible_spatial_rejected(self):
        spec = VacSpec(channels=4, condense_stride=2, embed_groups=2, embed_channels=4)
        params = random_vac_params(spec, rng(4))
        with pytest.raises(ValueError, match="divisible"):
            B.vac_forward(np.zeros((1, 4, 7, 8)), params, spec)

    def test_full_block_gradient(self):
        spec = VacSpec(channels=4, condense_stride=2, embed_groups=2, embed_channels=4)
        r = rng(5)
        params = random_vac_params(spec, r)
        v = r.normal(size=(1, 4, 8, 8))
        go = r.normal(size=v.shape)
        out, cache = B.vac_forward(v, params, spec, want_cache=True)
        gv, gp = B.vac_backward(go, cache, params, spec)
        check_grad(lambda x: float((B.vac_forward(x, params, spec) * go).sum()), v, gv)
        for name in gp:
            def f(x, name=name):
                p2 = dict(params)
                p2[name] = x
                return float((B.vac_forward(v, p2, spec) * go).sum())
            check_grad(f, params[name], gp[name])

    def test_gradient_sweep(self):
        r = rng(6)
        for trial in range(6):
            stride = int(r.choice([2, 4]))
            spec = VacSpec(channels=4, condense_stride=stride, embed_groups=2, embed_channels=4)
            params = random_vac_params(spec, r)
            v = r.normal(size=(1, 4, 8, 8))
            go = r.normal(size=v.shape)
            _, cache = B.vac_forward(v, params, spec, want_cache=True)
            gv, _ = B.vac_backward(go, cache, params, spec)
            check_grad(lambda x: float((B.vac_forward(x, params, spec) * go).sum()), v, gv)


class TestAadsDown:
    def test_halves_spatial_dims(self):
        spec = AadsSpec(1, 4)
        r = rng(7)
        params = {k: r.normal(size=s) * 0.2 for k, s in spec.param_shapes().items()}
        out = B.aads_down_block(np.zeros((1, 1, 224, 224)), params, spec)
        assert out.shape == (1, 4, 112, 112)

    def test_identity_conv_preserves_constants(self):
        spec = AadsSpec(3, 3, use_conv=False)
        x = np.full((2, 3, 16, 16), 1.25)
        out = B.aads_down_block(x, {}, spec)
        assert np.allclose(out, 1.25)

    def test_batch_preserved(self):
        spec = AadsSpec(2, 2, use_conv=False)
        out = B.aads_down_block(np.zeros((5, 2, 8, 8)), {}, spec)
        assert out.shape[0] == 5

    def test_gradient(self):
        spec = AadsSpec(2, 3)
        r = rng(8)
        params = {k: r.normal(size=s) * 0.3 for k, s in spec.param_shapes().items()}
        v = r.normal(size=(1, 2, 6, 6))
        go = r.normal(size=(1, 3, 3, 3))
        out, cache = B.aads_down_block(v, params, spec, want_cache=True)
        gv, gp = B.aads_down_backward(go, cache, params, spec)
        check_grad(lambda x: float((B.aads_down_block(x, params, spec) * go).sum()), v, gv)
        check_grad(
            lambda x: float((B.aads_down_block(v, {**params, "conv_w": x}, spec) * go).sum()),
            params["conv_w"],
            gp["conv_w"],
        )

    def test_identity_gradient(self):
        spec = AadsSpec(2, 2, use_conv=False)
        r = rng(9)
        v = r.normal(size=(1, 2, 6, 6))
        go = r.normal(size=(1, 2, 3, 3))
        _, cache = B.aads_down_block(v, {}, spec, want_cache=True)
        gv, _ = B.aads_down_backward(go, cache, {}, spec)
        check_grad(lambda x: float((B.aads_down_block(x, {}, spec) * go).sum()), v, gv)


class TestDualHead:
    def test_opposite_onehots_average(self):
        # Engineer weights so p1=(1,0), p2=(0,1) numerically.
        params = {
            "head1_w": np.array([[50.0], [-50.0]]),
            "head1_b": np.zeros(2),
            "head2_w": np.array([[-50.0], [50.0]]),
            "head2_b": np.zeros(2),
        }
        f = np.ones((1, 1))
        p1, p2, pa = B.dual_head_forward(f, params)
        assert np.allclose(p1, [[1.0, 0.0]], atol=1e-12)
        assert np.allclose(p2, [[0.0, 1.0]], atol=1e-12)
        assert np.allclose(pa, [[0.5, 0.5]])

    def test_identical_columns_agree(self):
        r = rng(10)
        w = r.normal(size=(2, 6))
        b = r.normal(size=2)
        params = {"head1_w": w, "head1_b": b, "head2_w": w.copy(), "head2_b": b.copy()}
        f = r.normal(size=(3, 6))
        p1, p2, pa = B.dual_head_forward(f, params)
        assert np.array_equal(p1, p2)
        assert np.allclose(pa, p1)

    def test_aggregate_is_distribution(self):
        r = rng(11)
        params = {
            "head1_w": r.normal(size=(2, 8)),
            "head1_b": r.normal(size=2),
            "head2_w": r.normal(size=(2, 8)),
            "head2_b": r.normal(size=2),
        }
        f = r.normal(size=(5, 8))
        _, _, pa = B.dual_head_forward(f, params)
        assert np.abs(pa.sum(axis=1) - 1.0).max() < 1e-9

    def test_argmax_invariant_to_column_swap(self):
        r = rng(12)
        params = {
            "head1_w": r.normal(size=(2, 8)),
            "head1_b": r.normal(size=2),
            "head2_w": r.normal(size=(2, 8)),
            "head2_b": r.normal(size=2),
        }
        swapped = {
            "head1_w": params["head2_w"], "head1_b": params["head2_b"],
            "head2_w": params["head1_w"], "head2_b": params["head1_b"],
        }
        f = r.normal(size=(6, 8))
        _, _, pa = B.dual_head_forward(f, params)
        _, _, pb = B.dual_head_forward(f, swapped)
        assert np.array_equal(pa.argmax(axis=1), pb.argmax(axis=1))

    def test_gradient(self):
        r = rng(13)
        params = {
            "head1_w": r.normal(size=(2, 5)),
            "head1_b": r.normal(size=2),
            "head2_w": r.normal(size=(2, 5)),
            "head2_b": r.normal(size=2),
        }
        f = r.normal(size=(3, 5))
        g1 = r.normal(size=(3, 2))
        g2 = r.normal(size=(3, 2))
        _, cache = B.dual_head_forward(f, params, want_cache=True)
        gf, gp = B.dual_head_backward(g1, g2, cache, params)

        def loss(x):
            p1, p2, _ = B.dual_head_forward(x, params)
            return float((p1 * g1).sum() + (p2 * g2).sum())

        check_grad(loss, f, gf)
        for name in gp:
            def f_param(x, name=name):
                p1, p2, _ = B.dual_head_forward(f, {**params, name: x})
                return float((p1 * g1).sum() + (p2 * g2).sum())
            check_grad(f_param, params[name], gp[name])
