import numpy as np

from boundaryflow.pipeline import wall_map
from boundaryflow.segmentation import oversegment


def ring(size=32, lo=8, hi=23, value=0.9):
    prob = np.zeros((size, size))
    prob[lo:hi + 1, lo] = prob[lo:hi + 1, hi] = value
    prob[lo, lo:hi + 1] = prob[hi, lo:hi + 1] = value
    return prob


class TestWallMap:
    def test_restores_raw_values_next_to_ridge_only(self):
        prob = ring()
        prob[2, 2] = 0.7                      # isolated response far from the ridge
        thin = prob.copy()
        thin[8, 8:10] = 0                     # NMS gap at a corner
        thin[2, 2] = 0
        wall = wall_map(prob, thin, 0.5)
        assert wall[8, 8] == wall[8, 9] == 0.9
        assert wall[2, 2] == 0
        np.testing.assert_array_equal(wall[thin >= 0.5], thin[thin >= 0.5])

    def test_seals_leaking_contour(self):
        prob = ring()
        thin = prob.copy()
        thin[8, 8:10] = 0
        img = np.full((32, 32, 3), 100, np.uint8)
        leaky = oversegment(thin, img, 16, 0.5)
        sealed = oversegment(wall_map(prob, thin, 0.5), img, 16, 0.5)
        assert leaky[15, 15] == leaky[2, 2]
        assert sealed[15, 15] != sealed[2, 2]
