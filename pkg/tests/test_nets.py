import numpy as np
import pytest

from rvsl import autograd as ag
from rvsl import nets

CFG16 = nets.NetConfig(image_size=16, base_channels=4, encoder_blocks=2,
                       embedding_dim=8, num_classes=5, discriminator_channels=4)


def fresh_models(seed=0, cfg=CFG16):
    return nets.build_models(cfg, seed)


def jitter_biases(module, seed):
    # zero biases put relu pre-activations exactly on the kink for windows
    # whose inputs vanish; finite differences are only valid away from kinks
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters().items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = rng.uniform(0.01, 0.1, p.data.shape)


class TestBuild:
    def test_same_seed_bit_identical(self):
        a = fresh_models(3)
        b = fresh_models(3)
        for (na, pa), (nb, pb) in zip(sorted(a.named_parameters().items()),
                                      sorted(b.named_parameters().items())):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_encoders_differ(self):
        m = fresh_models(1)
        wa = m.e_h.named_parameters()["block1.conv1.weight"].data
        wb = m.e_c.named_parameters()["block1.conv1.weight"].data
        assert not np.array_equal(wa, wb)
        assert wa.shape == wb.shape

    def test_kaiming_std(self):
        cfg = nets.NetConfig(image_size=16, base_channels=32, encoder_blocks=2,
                             embedding_dim=16, num_classes=None)
        m = nets.build_models(cfg, seed=0)
        for name, p in m.e_h.named_parameters().items():
            if name.endswith("conv2.weight"):
                fan_in = p.data.shape[1] * 9
                want = np.sqrt(2.0 / fan_in)
                assert abs(p.data.std() - want) / want < 0.2

    def test_invalid_cfg_rejected(self):
        with pytest.raises(ValueError):
            nets.NetConfig(image_size=20, encoder_blocks=3)
        with pytest.raises(ValueError):
            nets.NetConfig(embedding_dim=4)
        with pytest.raises(ValueError):
            nets.NetConfig(encoder_blocks=5)


class TestShapes:
    def test_encoder_output_dims(self):
        m = fresh_models()
        x = ag.tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16)))
        out = m.e_h(x, training=True)
        assert out.deep.data.shape == (2, 8, 4, 4)
        assert out.skip.data.shape == (2, 4, 8, 8)

    def test_wrong_input_size_rejected(self):
        m = fresh_models()
        with pytest.raises(ag.ShapeError):
            m.e_h(ag.tensor(np.zeros((1, 3, 8, 8))))

    def test_decode_restores_image_shape(self):
        for blocks in (1, 2, 3):
            cfg = nets.NetConfig(image_size=16, base_channels=4,
                                 encoder_blocks=blocks, embedding_dim=8)
            m = nets.build_models(cfg, 0)
            x = ag.tensor(np.random.default_rng(1).uniform(0, 1, (2, 3, 16, 16)))
            img = m.d_c(m.e_h(x), training=True)
            assert img.data.shape == (2, 3, 16, 16)
            assert (img.data > 0).all() and (img.data < 1).all()

    def test_reid_head_outputs(self):
        m = fresh_models()
        x = ag.tensor(np.random.default_rng(2).uniform(0, 1, (3, 3, 16, 16)))
        emb, logits = m.d_reid(m.e_h(x), training=True, with_logits=True)
        assert emb.data.shape == (3, 8)
        assert logits.data.shape == (3, 5)

    def test_reid_head_without_classes_rejected(self):
        cfg = nets.NetConfig(image_size=16, base_channels=4, encoder_blocks=2,
                             embedding_dim=8, num_classes=None)
        m = nets.build_models(cfg, 0)
        x = ag.tensor(np.zeros((1, 3, 16, 16)))
        with pytest.raises(ValueError):
            m.d_reid(m.e_h(x), with_logits=True)

    def test_identical_inputs_identical_embeddings(self):
        m = fresh_models()
        img = np.random.default_rng(3).uniform(0, 1, (1, 3, 16, 16))
        x = ag.tensor(np.concatenate([img, img]))
        emb, _ = m.d_reid(m.e_h(x), training=False)
        assert np.array_equal(emb.data[0], emb.data[1])

    def test_discriminator_range(self):
        m = fresh_models()
        x = ag.tensor(np.random.default_rng(4).uniform(0, 1, (4, 3, 16, 16)))
        p = m.disc_h(x)
        assert p.data.shape == (4, 1)
        assert (p.data > 0).all() and (p.data < 1).all()
        # untrained disc should not be saturated
        assert (np.abs(p.data - 0.5) < 0.3).all()


class TestGradients:
    def test_encode_path_finite_differences(self):
        cfg = nets.NetConfig(image_size=8, base_channels=2, encoder_blocks=1,
                             embedding_dim=8)
        m = nets.build_models(cfg, 5)
        x = ag.tensor(np.random.default_rng(5).uniform(0.2, 0.8, (2, 3, 8, 8)))
        params = m.e_h.parameters()

        def build():
            return ag.total_mean(m.e_h(x, training=True).deep)

        ok, err = ag.grad_check(build, params, tolerance=1e-3)
        assert ok, f"rel err {err}"

    def test_encode_decode_path_finite_differences(self):
        cfg = nets.NetConfig(image_size=8, base_channels=2, encoder_blocks=1,
                             embedding_dim=8)
        m = nets.build_models(cfg, 6)
        x = ag.tensor(np.random.default_rng(6).uniform(0.2, 0.8, (1, 3, 8, 8)))
        params = m.e_h.parameters() + m.d_c.parameters()

        def build():
            img = m.d_c(m.e_h(x, training=True), training=True)
            return ag.total_mean(img * img)

        ok, err = ag.grad_check(build, params, tolerance=1e-3)
        assert ok, f"rel err {err}"

    def test_reid_head_finite_differences(self):
        cfg = nets.NetConfig(image_size=8, base_channels=2, encoder_blocks=1,
                             embedding_dim=8, num_classes=3)
        m = nets.build_models(cfg, 7)
        x = ag.tensor(np.random.default_rng(7).uniform(0.2, 0.8, (2, 3, 8, 8)))
        params = m.d_reid.parameters()

        def build():
            emb, logits = m.d_reid(m.e_h(x, training=True), training=True,
                                   with_logits=True)
            return ag.total_mean(logits * logits) + ag.total_mean(ag.absolute(emb))

        ok, err = ag.grad_check(build, params, tolerance=1e-3)
        assert ok, f"rel err {err}"

    def test_discriminator_finite_differences(self):
        cfg = nets.NetConfig(image_size=8, base_channels=2, encoder_blocks=1,
                             embedding_dim=8, discriminator_channels=2)
        m = nets.build_models(cfg, 8)
        jitter_biases(m.disc_h, 88)
        x = ag.tensor(np.random.default_rng(8).uniform(0.2, 0.8, (2, 3, 8, 8)))
        params = m.disc_h.parameters()

        def build():
            return ag.total_mean(m.disc_h(x))

        ok, err = ag.grad_check(build, params, tolerance=1e-3)
        assert ok, f"rel err {err}"


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = fresh_models(9)
        # move BN buffers off their init values
        x = ag.tensor(np.random.default_rng(9).uniform(0, 1, (4, 3, 16, 16)))
        m.e_h(x, training=True)
        path = tmp_path / "model.ckpt"
        nets.save_checkpoint(m, path)
        m2 = fresh_models(123)
        nets.load_checkpoint(m2, path)
        for name, p in m.named_parameters().items():
            assert np.array_equal(p.data, m2.named_parameters()[name].data), name
        for name, b in m.named_buffers().items():
            assert np.array_equal(b, m2.named_buffers()[name]), name

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            nets.load_checkpoint(fresh_models(), path)

    def test_magic_bytes_and_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        nets.save_checkpoint(fresh_models(), path)
        blob = path.read_bytes()
        assert blob[:4] == b"RVSL"
        assert int.from_bytes(blob[4:8], "little") == 1
