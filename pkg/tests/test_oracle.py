import numpy as np
import pytest
from hypothesis import given, settings

from boundaryflow.oracle import (
    CASE_FLOW, CASE_OCCLUDED, NO_BOUNDARY, DenseFlow, Difficulty, Scene, Shape, BfGroundTruth,
    bf_oracle, boundary_points, check_ground_truth, generate_dataset, render_scene,
)
from oracles import brute_force, small_problem


def flow_of(shape, entries, valid_all=True):
    uv = np.zeros(shape + (2,), np.float32)
    valid = np.full(shape, valid_all)
    for (x, y), f in entries.items():
        if f is None:
            valid[y, x] = False
        else:
            uv[y, x] = f
            valid[y, x] = True
    return DenseFlow(uv, valid)


def mask(shape, pts):
    m = np.zeros(shape, bool)
    for x, y in pts:
        m[y, x] = True
    return m


class TestExamples:
    shape = (6, 8)

    def test_exact_landing(self):
        gt = bf_oracle(mask(self.shape, [(2, 2)]), mask(self.shape, [(3, 2)]),
                       flow_of(self.shape, {(2, 2): (1, 0)}))
        assert gt.as_dict() == {(2, 2): (1.0, 0.0)}
        assert gt.case[0] == CASE_FLOW

    def test_nearest_boundary(self):
        gt = bf_oracle(mask(self.shape, [(2, 2)]), mask(self.shape, [(5, 2)]),
                       flow_of(self.shape, {(2, 2): (1, 0)}))
        assert gt.as_dict() == {(2, 2): (3.0, 0.0)}

    def test_occluded_takes_nearest_valid_flow(self):
        b1 = mask(self.shape, [(2, 2), (4, 2)])
        flow = flow_of(self.shape, {(2, 2): None, (4, 2): (0, 1)})
        gt = bf_oracle(b1, mask(self.shape, [(4, 3)]), flow)
        d = gt.as_dict()
        assert d[(2, 2)] == (0.0, 1.0)
        assert gt.case[list(map(tuple, gt.points)).index((2, 2))] == CASE_OCCLUDED

    def test_symmetric_tie_is_undefined(self):
        gt = bf_oracle(mask(self.shape, [(2, 2)]), mask(self.shape, [(3, 1), (3, 3)]),
                       flow_of(self.shape, {(2, 2): (1, 0)}))
        assert gt.as_dict() == {(2, 2): None}
        assert gt.reason[0].startswith("tie")

    def test_empty_b2(self):
        gt = bf_oracle(mask(self.shape, [(2, 2), (3, 3)]), np.zeros(self.shape, bool),
                       flow_of(self.shape, {}))
        assert not gt.defined.any()
        assert gt.reason == [NO_BOUNDARY, NO_BOUNDARY]

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="size mismatch"):
            bf_oracle(np.zeros((4, 4), bool), np.zeros((4, 5), bool), flow_of((4, 4), {}))

    def test_all_pixels_domain(self):
        b1 = mask(self.shape, [(2, 2)])
        uv = np.zeros(self.shape + (2,), np.float32)
        uv[2, 3] = (0, 1)
        valid = np.zeros(self.shape, bool)
        valid[2, 3] = True
        gt = bf_oracle(b1, mask(self.shape, [(0, 0)]), DenseFlow(uv, valid), "all")
        assert gt.as_dict() == {(2, 2): (0.0, 1.0)}
        assert not bf_oracle(b1, mask(self.shape, [(0, 0)]), DenseFlow(uv, valid)).defined.any()


class TestTextFormat:
    def test_round_trip(self):
        b1 = mask((6, 8), [(2, 2), (4, 2), (1, 1)])
        flow = flow_of((6, 8), {(2, 2): None, (4, 2): (0.25, 1), (1, 1): (1, 0)})
        gt = bf_oracle(b1, mask((6, 8), [(2, 1), (0, 0)]), flow)
        text = gt.to_text()
        again = BfGroundTruth.from_text(text)
        assert again.to_text() == text
        np.testing.assert_array_equal(again.points, gt.points)
        np.testing.assert_array_equal(again.flow, gt.flow)


class TestBruteForce:
    @settings(max_examples=60, deadline=None)
    @given(small_problem())
    def test_matches_full_scan(self, prob):
        b1, b2, flow = prob
        gt = bf_oracle(b1, b2, flow)
        assert gt.as_dict() == brute_force(b1, b2, flow)

    @settings(max_examples=60, deadline=None)
    @given(small_problem())
    def test_case_one_lands_on_b2(self, prob):
        b1, b2, flow = prob
        check_ground_truth(bf_oracle(b1, b2, flow), b2)


class TestScenes:
    def square(self, t=(5.0, 0.0)):
        v = np.array([[-4, -4], [4, -4], [4, 4], [-4, 4]], float)
        return Shape("polygon", (0.9, 0.1, 0.1), (14.0, 16.0), translation=t, vertices=v)

    def test_translating_square(self):
        scene = Scene((32, 32), [self.square()])
        _, b, flow, lab = render_scene(scene, 0)
        inside = lab == 0
        np.testing.assert_array_equal(flow.uv[inside], np.tile([5.0, 0.0], (inside.sum(), 1)))
        np.testing.assert_array_equal(flow.uv[~inside], 0.0)
        ys, xs = np.nonzero(b)
        assert (xs.min(), xs.max(), ys.min(), ys.max()) == (10, 17, 12, 19)
        assert b.sum() == 4 * 7
        gt = bf_oracle(b, render_scene(scene, 1)[1], flow)
        assert gt.defined.all()
        np.testing.assert_array_equal(gt.flow, np.tile([5.0, 0.0], (len(gt), 1)))

    def test_occluder_invalidates_covered_pixels(self):
        occ = Shape("polygon", (0.1, 0.9, 0.1), (22.0, 16.0),
                    vertices=np.array([[-3, -8], [3, -8], [3, 8], [-3, 8]], float))
        scene = Scene((32, 32), [self.square(), occ])
        _, _, flow, lab = render_scene(scene, 0)
        # right part of the square moves under the occluder
        assert not flow.valid[16, 15]
        assert flow.valid[16, 11]

    def test_degenerate_shapes_rejected(self):
        with pytest.raises(ValueError, match="zero area"):
            Shape("polygon", (0, 0, 0), (0, 0), vertices=[[0, 0], [1, 1], [2, 2]])
        with pytest.raises(ValueError, match="zero radius"):
            Shape("disk", (0, 0, 0), (0, 0))


class TestDataset:
    def test_deterministic(self):
        a = generate_dataset(5, seed=3)
        b = generate_dataset(5, seed=3)
        for x, y in zip(a, b):
            assert x.frame_a.tobytes() == y.frame_a.tobytes()
            assert x.frame_b.tobytes() == y.frame_b.tobytes()
            assert x.bf.to_text() == y.bf.to_text()

    def test_mix_and_validity(self):
        data = generate_dataset(10, seed=4)
        assert [s.kind for s in data].count("translation") == 6
        assert [s.kind for s in data].count("rotation") == 2
        for s in data:
            check_ground_truth(s.bf, s.boundary_b)
            np.testing.assert_array_equal(s.bf.points, boundary_points(s.boundary_a))

    def test_pure_translation_bf_equals_flow(self):
        diff = Difficulty(n_shapes=(1, 1), texture=0.0, noise=0.0)
        s = generate_dataset(1, seed=5, difficulty=diff)[0]
        assert s.kind == "translation"
        p = s.bf.points
        ok = s.flow.valid[p[:, 1], p[:, 0]]
        np.testing.assert_array_equal(s.bf.flow[ok], s.flow.uv[p[ok, 1], p[ok, 0]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            generate_dataset(0, seed=1)
