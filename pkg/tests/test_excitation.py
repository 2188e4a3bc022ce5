import numpy as np
import pytest
from hypothesis import given, settings

from boundaryflow.excitation import (
    Excitation, ExcitationSeed, PixelScores, attention_score_pair, pixel_scores,
    propagate_conv_down, propagate_conv_up, propagate_dense, relevance_to_pgm, seed_maps,
)
from boundaryflow.fcsn import Fcsn, FcsnConfig
from boundaryflow.tensor import ShapeError, conv2d, deconv2d
from oracles import enumerate_paths, two_layer_net

TINY = dict(encoder_channels=(4, 6), convs_per_block=(1, 1), fc6_channels=8,
            decoder_channels=(6, 4, 3), dropout=(0.0, 0.0, 0.0), patch_size=(8, 8))


def conv_matrix(w, shape, pad, transposed):
    """Dense (outputs, inputs) matrix of a bias-free (de)convolution."""
    c, h, wd = shape
    op = deconv2d if transposed else conv2d
    cols = []
    for k in range(c * h * wd):
        e = np.zeros((1, c, h, wd), np.float32)
        e.reshape(-1)[k] = 1
        cols.append(op(e, w, None, 1, pad).reshape(-1).astype(np.float64))
    return np.stack(cols, axis=1)


class TestDenseRule:
    def test_two_children(self):
        np.testing.assert_allclose(propagate_dense([1.0], [[1, 1]], [2, 1]), [2 / 3, 1 / 3])

    def test_negative_weight_clipped(self):
        np.testing.assert_allclose(propagate_dense([1.0], [[1, -5]], [2, 1]), [1, 0])

    def test_symmetric_split(self):
        np.testing.assert_allclose(propagate_dense([1.0], [[3, 3, 3]], [1, 1, 1]), [1 / 3] * 3)

    def test_zero_denominator_drops_and_logs(self):
        stats = {}
        out = propagate_dense([0.5, 0.5], [[1, 1], [-1, 0]], [1, 1], stats)
        np.testing.assert_allclose(out, [0.25, 0.25])
        assert stats["dense"] == pytest.approx(0.5)

    @settings(max_examples=100, deadline=None)
    @given(two_layer_net())
    def test_matches_path_enumeration(self, net):
        p, w2, a_hid, w1, a_in = net
        hid = propagate_dense(p, w2, a_hid)
        got = propagate_dense(hid, w1, a_in)
        np.testing.assert_allclose(got, enumerate_paths(p, w2, a_hid, w1, a_in), rtol=0,
                                   atol=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(two_layer_net())
    def test_mass_conserved_without_dead_parents(self, net):
        p, w2, a_hid, w1, a_in = net
        a_in, a_hid = a_in + 0.1, a_hid + 0.1
        w1, w2 = np.abs(w1), np.abs(w2)
        got = propagate_dense(propagate_dense(p, w2, a_hid), w1, a_in)
        assert abs(got.sum() - 1) < 1e-5
        assert np.all(got >= 0)


class TestConvRules:
    @pytest.mark.parametrize("transposed", [False, True])
    def test_down_rule_equals_dense_rule(self, transposed):
        rng = np.random.default_rng(0)
        c, o, h, w, k, pad = 2, 3, 5, 4, 3, 1
        wt = rng.normal(size=(c, o, k, k) if transposed else (o, c, k, k)).astype(np.float32)
        a_in = (rng.random((1, c, h, w)) * (rng.random((1, c, h, w)) > 0.3)).astype(np.float32)
        p_out = rng.random((1, o, h, w)).astype(np.float32)
        m = conv_matrix(wt, (c, h, w), pad, transposed)
        ref = propagate_dense(p_out.reshape(-1), m, a_in.reshape(-1).astype(np.float64))
        got = propagate_conv_down(p_out, a_in, wt, pad, transposed)
        np.testing.assert_allclose(got.reshape(-1), ref, atol=1e-6)

    @pytest.mark.parametrize("transposed", [False, True])
    def test_up_rule_equals_dense_rule_reversed(self, transposed):
        rng = np.random.default_rng(1)
        c, o, h, w, k, pad = 2, 3, 4, 5, 3, 1
        wt = rng.normal(size=(c, o, k, k) if transposed else (o, c, k, k)).astype(np.float32)
        a_out = rng.random((1, o, h, w)).astype(np.float32)
        p_in = rng.random((1, c, h, w)).astype(np.float32)
        m = conv_matrix(wt, (c, h, w), pad, transposed)
        ref = propagate_dense(p_in.reshape(-1), m.T, a_out.reshape(-1).astype(np.float64))
        got = propagate_conv_up(p_in, a_out, wt, pad, transposed)
        np.testing.assert_allclose(got.reshape(-1), ref, atol=1e-6)


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(3)
    net = Fcsn(FcsnConfig(**TINY))
    a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    b = np.roll(a, 2, axis=1)
    out = net.forward_pair(a, b)
    return net, out, Excitation(net, out)


class TestNetworkLegs:
    def test_nonnegative_and_bounded(self, toy):
        _, _, exc = toy
        seed = ExcitationSeed(0, [(3, 4), (4, 4), (5, 4)])
        rel = exc.backward_to_jfr(seed_maps(seed.pixels, exc.shape, seed.mass), 0)
        assert rel.min() >= 0 and rel.sum() <= 1 + 1e-5
        att = exc.attention(seed)
        assert att.min() >= 0 and att.sum() <= rel.sum() + 1e-5

    def test_empty_seed_and_zero_jfr(self, toy):
        _, out, exc = toy
        np.testing.assert_array_equal(exc.attention(ExcitationSeed(0, np.zeros((0, 2)))), 0)
        zero = np.zeros((1,) + out.jfr.shape[1:], np.float32)
        np.testing.assert_array_equal(exc.forward_from_jfr(zero, 1), 0)

    def test_seed_runs_are_independent(self, toy):
        _, _, exc = toy
        pix = np.array([[1, 1], [7, 9], [12, 3]])
        both = exc.transfer(seed_maps(pix, exc.shape), 0)
        flipped = exc.transfer(seed_maps(pix[::-1], exc.shape), 0)
        np.testing.assert_array_equal(flipped[::-1], both)
        # different batch sizes may pick different GEMM kernels: equal up to rounding
        for k in range(3):
            alone = exc.transfer(seed_maps(pix[k:k + 1], exc.shape), 0)
            np.testing.assert_allclose(alone[0], both[k], rtol=1e-5, atol=1e-12)

    def test_edgelet_seed_is_mean_of_pixel_seeds(self, toy):
        _, _, exc = toy
        pix = np.array([[2, 5], [3, 5], [4, 6]])
        per = exc.transfer(seed_maps(pix, exc.shape), 1)
        np.testing.assert_allclose(exc.attention(ExcitationSeed(1, pix)), per.mean(axis=0),
                                   atol=1e-7)

    @pytest.mark.parametrize("source", [0, 1])
    def test_sparse_passes_equal_dense_legs(self, toy, source):
        _, _, exc = toy
        pix = np.array([[0, 0], [5, 7], [15, 15], [8, 2]])
        read = np.array([[1, 1], [5, 8], [14, 15], [9, 3], [0, 15]])
        dense = exc.transfer(seed_maps(pix, exc.shape), source)[:, read[:, 1], read[:, 0]]
        np.testing.assert_allclose(exc.pixel_attention(pix, source, read), dense,
                                   rtol=1e-4, atol=1e-9)

    def test_canonical_jfr_is_branch_independent_layout(self, toy):
        _, _, exc = toy
        r0 = exc.backward_to_jfr(seed_maps([[4, 4]], exc.shape), 0)
        np.testing.assert_array_equal(exc.jfr_vectors([[4, 4]], 0, "down") > 0,
                                      r0.reshape(1, -1) > 0)

    def test_stale_cache_rejected(self, toy):
        _, out, _ = toy
        other = Fcsn(FcsnConfig(**dict(TINY, fc6_channels=10)))
        with pytest.raises(ShapeError):
            Excitation(other, out)

    def test_seed_outside_image(self, toy):
        with pytest.raises(ValueError):
            seed_maps([[16, 0]], (16, 16))

    def test_seed_frame_checked(self):
        with pytest.raises(ValueError):
            ExcitationSeed(2, [(0, 0)])


class TestScores:
    def test_pair_is_elementwise_mean(self):
        rng = np.random.default_rng(4)
        f, b = rng.random((3, 4)), rng.random((3, 4))
        np.testing.assert_array_equal(attention_score_pair(f, b), 0.5 * (f + b))
        with pytest.raises(ValueError):
            attention_score_pair(f, b.T)

    def test_pixel_scores_shapes(self, toy):
        _, _, exc = toy
        pa = np.array([[1, 2], [3, 4], [5, 6]])
        pb = np.array([[2, 2], [6, 6]])
        sc = pixel_scores(exc, pa, pb)
        assert sc.forward.shape == sc.backward.shape == (3, 2)
        assert sc.forward.min() >= 0 and sc.backward.min() >= 0

    def test_pair_matrix_averages_chains(self):
        rng = np.random.default_rng(5)
        pa = np.array([[0, 0], [1, 0], [2, 0]])
        pb = np.array([[0, 1], [1, 1]])
        sc = PixelScores(pa, pb, rng.random((3, 2)), rng.random((3, 2)))
        m = sc.pair_matrix(pa[:2], pb)
        expect = 0.5 * (sc.forward[:2].mean(0)[None, :] + sc.backward[:2].mean(1)[:, None])
        np.testing.assert_allclose(m, expect)
        np.testing.assert_allclose(sc.pixel_matrix(pa, pb), 0.5 * (sc.forward + sc.backward))

    def test_debug_image(self):
        img = relevance_to_pgm(np.array([[0.0, 0.5], [1.0, 0.25]]))
        np.testing.assert_array_equal(img, [[0, 32768], [65535, 16384]])
        np.testing.assert_array_equal(relevance_to_pgm(np.zeros((2, 2))), 0)
