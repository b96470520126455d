import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iais import autodiff as ad
from iais.attention import AttentionBlocks, ModalityLayout
from iais.regularizer import (DISTRIBUTED, SINGULAR, alignment_terms, distributed_mirror, iais_distributed,
                              iais_singular, mirrors, singular_mirror)
from iais.tensor_ops import row_softmax

from oracles import (central_difference, distributed_loss_loop, distributed_mirror_loop, rel_error,
                     singular_loss_loop, singular_mirror_loop)


def random_blocks(rng, n_l, n_v, spread=1.5):
    s = rng.normal(size=(n_l + n_v, n_l + n_v)) * spread
    return AttentionBlocks(s[:n_l, :n_l], s[:n_l, n_l:], s[n_l:, :n_l], s[n_l:, n_l:], ModalityLayout(n_l, n_v))


class TestSingularMirror:
    def test_identity_mapping(self):
        s_ll = np.random.default_rng(0).normal(size=(3, 3))
        s_vl = np.eye(3) * 5
        assert np.array_equal(singular_mirror(s_ll, s_vl), s_ll)

    def test_hand_example(self):
        assert singular_mirror([[5, 6], [7, 8]], [[1, 2], [3, 0]]).tolist() == [[8, 7], [6, 5]]

    def test_collapsed_mapping(self):
        src = np.arange(9.0).reshape(3, 3)
        cross = np.array([[0, 0, 1.0], [0, 0, 2.0]])
        assert singular_mirror(src, cross).tolist() == [[8.0, 8.0], [8.0, 8.0]]

    def test_matches_loops(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n_l, n_v = rng.integers(1, 9, size=2)
            b = random_blocks(rng, n_l, n_v)
            assert np.array_equal(singular_mirror(b.s_ll, b.s_vl), np.array(singular_mirror_loop(b.s_ll, b.s_vl)))
            assert np.array_equal(singular_mirror(b.s_vv, b.s_lv), np.array(singular_mirror_loop(b.s_vv, b.s_lv)))

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            singular_mirror(np.zeros((2, 3)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            singular_mirror(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDistributedMirror:
    def test_one_hot_selection(self):
        s_vl = np.array([[50.0, 0.0], [0.0, 50.0]])
        s_lv = np.array([[0.3, -0.2], [1.0, 0.4]])
        vv, _ = distributed_mirror(s_vl, s_lv)
        assert np.allclose(vv, row_softmax(s_lv), atol=1e-15)

    def test_hand_product(self):
        s_vl = np.zeros((2, 2))  # uniform rows
        s_lv = np.log([[0.25, 0.75], [0.75, 0.25]])
        vv, ll = distributed_mirror(s_vl, s_lv)
        assert np.allclose(vv, [[0.5, 0.5], [0.5, 0.5]], rtol=1e-15)
        assert np.allclose(ll, [[0.5, 0.5], [0.5, 0.5]], rtol=1e-15)

    def test_matches_loops_and_is_stochastic(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n_l, n_v = rng.integers(1, 9, size=2)
            b = random_blocks(rng, n_l, n_v)
            vv, ll = distributed_mirror(b.s_vl, b.s_lv, 0.5)
            ovv, oll = distributed_mirror_loop(b.s_vl, b.s_lv, 0.5)
            assert np.allclose(vv, ovv, rtol=1e-12, atol=0)
            assert np.allclose(ll, oll, rtol=1e-12, atol=0)
            assert np.abs(vv.sum(axis=1) - 1).max() < 1e-10

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            distributed_mirror(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_mirrors_helper(self):
        b = random_blocks(np.random.default_rng(3), 3, 2)
        for kind in (SINGULAR, DISTRIBUTED):
            m = mirrors(b, kind)
            assert m["V"].mirrored.shape == (2, 2) and m["L"].mirrored.shape == (3, 3)
        with pytest.raises(ValueError):
            mirrors(b, "soft")


class TestLosses:
    def test_singular_matched_is_zero(self):
        rng = np.random.default_rng(4)
        s = rng.normal(size=(3, 3))
        b = AttentionBlocks(s, np.eye(3) * 4, np.eye(3) * 4, s.copy(), ModalityLayout(3, 3))
        loss, parts = iais_singular(b)
        assert abs(loss) <= 1e-12 and parts.total == loss

    def test_distributed_matched_v_part_is_zero(self):
        rng = np.random.default_rng(5)
        s_vl, s_lv = rng.normal(size=(3, 4)), rng.normal(size=(4, 3))
        target = row_softmax(s_vl) @ row_softmax(s_lv)
        s_vv = np.log(target)  # row softmax recovers the product exactly up to rounding
        b = AttentionBlocks(rng.normal(size=(4, 4)), s_lv, s_vl, s_vv, ModalityLayout(4, 3))
        _, parts = iais_distributed(b)
        assert abs(parts.v) <= 1e-10

    @pytest.mark.parametrize("n_l,n_v", [(5, 4), (4, 3), (1, 1), (2, 6)])
    def test_losses_match_loop_oracles(self, n_l, n_v):
        rng = np.random.default_rng(n_l * 10 + n_v)
        for _ in range(5):
            b = random_blocks(rng, n_l, n_v)
            scale = float(rng.uniform(0.2, 1.0))
            _, ps = iais_singular(b, scale)
            ov, ol = singular_loss_loop(b.s_ll, b.s_lv, b.s_vl, b.s_vv, scale)
            assert ps.v == pytest.approx(ov, rel=1e-10, abs=1e-13)
            assert ps.l == pytest.approx(ol, rel=1e-10, abs=1e-13)
            _, pd = iais_distributed(b, scale)
            ov, ol = distributed_loss_loop(b.s_ll, b.s_lv, b.s_vl, b.s_vv, scale)
            assert pd.v == pytest.approx(ov, rel=1e-10, abs=1e-13)
            assert pd.l == pytest.approx(ol, rel=1e-10, abs=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_nonnegative(self, n_l, n_v, seed):
        b = random_blocks(np.random.default_rng(seed), n_l, n_v, spread=4.0)
        assert iais_singular(b)[0] >= -1e-12
        assert iais_distributed(b)[0] >= -1e-12

    def test_total_is_sum_of_parts(self):
        b = random_blocks(np.random.default_rng(6), 4, 3)
        for fn in (iais_singular, iais_distributed):
            loss, parts = fn(b)
            assert loss == parts.v + parts.l

    @pytest.mark.parametrize("kind", [SINGULAR, DISTRIBUTED])
    def test_gradients(self, kind):
        rng = np.random.default_rng(7)
        b = random_blocks(rng, 4, 3)
        arrays = [b.s_ll, b.s_lv, b.s_vl, b.s_vv]

        def value(xs):
            v, l = alignment_terms(kind, *xs, scale=0.7)
            return (v + l).item()

        ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
        v, l = alignment_terms(kind, *ts, scale=0.7)
        (v + l).backward()
        for i, a in enumerate(arrays):
            def f(x, i=i):
                xs = list(arrays)
                xs[i] = x
                return value(xs)
            assert rel_error(ts[i].grad, central_difference(f, a)) < 1e-6

    def test_singular_gradient_skips_cross_blocks(self):
        # argmax indices are constants, so the cross blocks receive no gradient
        b = random_blocks(np.random.default_rng(8), 3, 3)
        ts = [ad.Tensor(a, requires_grad=True) for a in (b.s_ll, b.s_lv, b.s_vl, b.s_vv)]
        v, l = alignment_terms(SINGULAR, *ts)
        (v + l).backward()
        assert not ts[1].grad.any() and not ts[2].grad.any()
        assert ts[0].grad.any() and ts[3].grad.any()

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            alignment_terms("hard", np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
