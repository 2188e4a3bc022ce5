import numpy as np
import pytest

from boundaryflow.fcsn import (
    Fcsn, FcsnConfig, TrainingAborted, checkpoint_bytes, checkpoint_from_bytes, fuse,
    load_checkpoint, save_checkpoint, swap_halves, train,
)
from boundaryflow.tensor import ShapeError, grad_check, precision

TINY = dict(encoder_channels=(4, 6), convs_per_block=(1, 1), fc6_channels=8,
            decoder_channels=(6, 4, 3), dropout=(0.0, 0.0, 0.0), patch_size=(8, 8))


def tiny(**kw):
    cfg = dict(TINY)
    cfg.update(kw)
    return FcsnConfig(**cfg)


def images(rng, n=2, size=16):
    return [rng.integers(0, 256, (size, size, 3), dtype=np.uint8) for _ in range(n)]


class TestConfig:
    def test_defaults_validate(self):
        cfg = FcsnConfig()
        assert cfg.lambda_boundary == 1.0 and cfg.lambda_background == 0.1 and cfg.lr == 1e-4
        assert cfg.jfr_channels == 2 * cfg.fc6_channels

    def test_full_scale_layout(self):
        cfg = FcsnConfig.full_scale()
        assert cfg.decoder_channels == (512, 512, 256, 128, 64, 32)
        assert cfg.patch_size == (224, 224)

    def test_shallow_preset(self):
        cfg = FcsnConfig.shallow()
        assert cfg.n_pools == 1 and set(cfg.dropout) == {0.0}
        cfg.check_input_size((8, 8))
        net = Fcsn(cfg)
        assert net.params["head.b"][1] == cfg.boundary_prior and net.params["head.b"][0] == 0
        assert FcsnConfig.from_kv(cfg.to_kv()) == cfg

    def test_decoder_must_mirror_encoder(self):
        with pytest.raises(ValueError, match="must output"):
            tiny(decoder_channels=(5, 4, 3))
        with pytest.raises(ValueError, match="deconv layers"):
            tiny(decoder_channels=(6, 4), dropout=(0.0, 0.0))

    def test_kv_round_trip(self):
        cfg = tiny(seed=5, lr=3e-4)
        again = FcsnConfig.from_kv(cfg.to_kv())
        assert again == cfg
        assert again.to_kv() == cfg.to_kv()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            FcsnConfig.from_kv("learning_rate = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ValueError, match="cannot parse"):
            FcsnConfig.from_kv("lr = fast\n")

    def test_input_size_error_names_multiple(self):
        with pytest.raises(ShapeError, match="multiple of 4"):
            tiny().check_input_size((10, 12))

    def test_shape_plan(self):
        plan = dict(tiny().shape_plan((16, 16)))
        assert plan["jfr"] == (16, 4, 4)
        assert plan["head"] == (2, 16, 16)


class TestForward:
    def test_output_shapes_and_range(self):
        rng = np.random.default_rng(0)
        net = Fcsn(tiny())
        a, b = images(rng)
        pa, pb = net.predict(a, b)
        assert pa.shape == pb.shape == (16, 16)
        assert np.all((pa >= 0) & (pa <= 1))

    def test_identical_frames_give_identical_maps(self):
        rng = np.random.default_rng(1)
        net = Fcsn(tiny())
        a, _ = images(rng)
        pa, pb = net.predict(a, a)
        np.testing.assert_array_equal(pa, pb)

    def test_swapping_frames_swaps_outputs(self):
        rng = np.random.default_rng(2)
        net = Fcsn(tiny())
        a, b = images(rng)
        pa, pb = net.predict(a, b)
        qa, qb = net.predict(b, a)
        np.testing.assert_array_equal(pa, qb)
        np.testing.assert_array_equal(pb, qa)

    def test_frames_must_match(self):
        net = Fcsn(tiny())
        with pytest.raises(ShapeError):
            net.predict(np.zeros((16, 16, 3), np.uint8), np.zeros((8, 8, 3), np.uint8))

    def test_indivisible_size(self):
        net = Fcsn(tiny())
        with pytest.raises(ShapeError, match="multiple of 4"):
            net.predict(np.zeros((10, 10, 3), np.uint8), np.zeros((10, 10, 3), np.uint8))

    def test_halves(self):
        a = np.zeros((1, 2, 1, 1))
        b = np.ones((1, 2, 1, 1))
        np.testing.assert_array_equal(swap_halves(fuse(a, b)), fuse(b, a))

    def test_eval_mode_is_deterministic(self):
        rng = np.random.default_rng(3)
        net = Fcsn(tiny(dropout=(0.5, 0.5, 0.5)))
        a, b = images(rng)
        np.testing.assert_array_equal(net.predict(a, b)[0], net.predict(a, b)[0])


class TestGradients:
    def _check(self, cfg, size, tol):
        rng = np.random.default_rng(4)
        with precision(np.float64):
            net = Fcsn(cfg).cast(np.float64)
            xa = rng.uniform(-0.5, 0.5, (1, 3, size, size))
            xb = rng.uniform(-0.5, 0.5, (1, 3, size, size))
            y = (rng.random((1, size, size)) < 0.2).astype(np.float64)

            def f(params):
                return net.loss_and_grads(xa, xb, y, mode="eval")

            return grad_check(f, net.params, tolerance=tol, h=1e-5, max_entries=6, rng=rng)

    def test_end_to_end_tiny(self):
        rep = self._check(tiny(), 8, 1e-2)
        assert rep.passed, str(rep)

    def test_float32_engine_restored(self):
        with precision(np.float64):
            pass
        net = Fcsn(tiny())
        pa, _ = net.predict(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8, 3), np.uint8))
        assert pa.dtype == np.float32

    def test_frozen_encoder_gets_no_gradient(self):
        rng = np.random.default_rng(5)
        net = Fcsn(tiny(train_encoder=False))
        a, b = images(rng)
        _, g = net.loss_and_grads(a, b, np.zeros((16, 16)), mode="eval")
        assert not np.any(g["enc0_0.w"])
        assert np.any(g["head.w"])


class TestTraining:
    def test_nan_aborts_before_update(self):
        rng = np.random.default_rng(6)
        net = Fcsn(tiny())
        a, b = images(rng)
        before = {k: v.copy() for k, v in net.params.items()}
        net.params["head.w"][0, 0, 0, 0] = np.nan
        before["head.w"] = net.params["head.w"].copy()
        with pytest.raises(TrainingAborted):
            net.train_step(a, b, np.zeros((16, 16)))
        for k, v in net.params.items():
            np.testing.assert_array_equal(v, before[k])
        assert net.store.t == 0

    def test_loss_decreases_on_one_pair(self):
        rng = np.random.default_rng(7)
        a, b = images(rng)
        y = np.zeros((16, 16))
        y[4:12, 4] = y[4:12, 11] = y[4, 4:12] = y[11, 4:12] = 1

        class Item:
            frame_a, frame_b, boundary_a = a, b, y

        net = Fcsn(tiny(lr=1e-2, flip_augment=False))
        log = train(net, [Item()], iterations=60)
        assert np.mean(log.losses[-10:]) < 0.5 * np.mean(log.losses[:10])
        assert net.store.t == 60

    def test_seeded_training_is_reproducible(self):
        rng = np.random.default_rng(8)
        a, b = images(rng)

        class Item:
            frame_a, frame_b, boundary_a = a, b, np.zeros((16, 16))

        runs = []
        for _ in range(2):
            net = Fcsn(tiny(dropout=(0.5, 0.5, 0.5), seed=3))
            train(net, [Item()], iterations=5)
            runs.append(checkpoint_bytes(net))
        assert runs[0] == runs[1]


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(9)
        net = Fcsn(tiny())
        a, b = images(rng)
        net.train_step(a, b, np.zeros((16, 16)))
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        again = load_checkpoint(path)
        assert again.store.t == 1
        assert checkpoint_bytes(again) == path.read_bytes()
        np.testing.assert_array_equal(again.predict(a, b)[0], net.predict(a, b)[0])

    def test_resume_continues_counter(self):
        rng = np.random.default_rng(10)
        a, b = images(rng)

        class Item:
            frame_a, frame_b, boundary_a = a, b, np.zeros((16, 16))

        net = Fcsn(tiny())
        train(net, [Item()], iterations=3)
        again = checkpoint_from_bytes(checkpoint_bytes(net))
        train(again, [Item()], iterations=2)
        assert again.store.t == 5

    def test_version_mismatch(self):
        data = bytearray(checkpoint_bytes(Fcsn(tiny())))
        data[4] = 9
        with pytest.raises(ValueError, match="version"):
            checkpoint_from_bytes(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="not an FCSN"):
            checkpoint_from_bytes(b"XXXX" + b"\0" * 20)

    def test_weights_only(self):
        net = Fcsn(tiny())
        slim = checkpoint_from_bytes(checkpoint_bytes(net, include_optimizer=False))
        for k in net.params:
            np.testing.assert_array_equal(slim.params[k], net.params[k])
