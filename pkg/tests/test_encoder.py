import math

import numpy as np
import pytest
import torch

from mothernet.encoder import (
    PRESETS,
    ChildConfig,
    EncoderConfig,
    ModelConfig,
    MotherNet,
    checkpoint_bytes,
    class_average_pool,
    load_checkpoint,
    save_checkpoint,
    unpack_phi_torch,
)
from mothernet.errors import FormatError, NumericInputError
from mothernet.train import batch_loss, collate


def rand_batch(rng, n=12, d=4, c=3, dtype=torch.float64):
    X = np.zeros((1, n, 100))
    X[0, :, :d] = rng.standard_normal((n, d))
    y = np.arange(n) % c
    return torch.as_tensor(X, dtype=dtype), torch.as_tensor(y[None])


class TestChildConfig:
    def test_phi_len(self):
        assert ChildConfig(h=64, r=8).phi_len == 2 * 64 * 8 + 10 * 8 + 2 * 64 + 10
        # large settings: with and without biases
        assert ChildConfig(h=512, r=32).phi_len == 34122
        assert ChildConfig(h=512, r=32).phi_len - (2 * 512 + 10) == 33088

    def test_slices_tile_phi(self):
        cfg = ChildConfig(h=8, r=2)
        pos = 0
        for sl, shape in cfg.phi_slices().values():
            assert sl.start == pos
            assert sl.stop - sl.start == math.prod(shape)
            pos = sl.stop
        assert pos == cfg.phi_len

    def test_invalid(self):
        with pytest.raises(ValueError):
            ChildConfig(h=4, r=8)
        with pytest.raises(ValueError):
            EncoderConfig(m=10, heads=4)

    def test_config_round_trip(self):
        cfg = PRESETS["tiny"]
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_phi_shape_and_counter(self, tiny_model, rng):
        X, y = rand_batch(rng, dtype=torch.float32)
        before = tiny_model.encoder_calls
        phi = tiny_model(X, y)
        assert phi.shape == (1, PRESETS["tiny"].child.phi_len)
        assert tiny_model.encoder_calls == before + 1

    def test_zero_layers_is_identity(self, rng):
        cfg = ModelConfig(EncoderConfig(m=8, n_layers=0, heads=2, ff_hidden=8, decoder_hidden=8), ChildConfig(h=8, r=2))
        model = MotherNet(cfg).double()
        X, y = rand_batch(rng)
        tok = model.embed_tokens(X, y)
        assert torch.equal(model.transformer_forward(tok), tok)

    def test_row_permutation_invariance(self, rng):
        torch.manual_seed(1)
        model = MotherNet(PRESETS["tiny"]).double()
        X, y = rand_batch(rng, n=20)
        ref = model(X, y)
        for _ in range(10):
            p = torch.as_tensor(rng.permutation(20))
            torch.testing.assert_close(model(X[:, p], y[:, p]), ref, rtol=1e-10, atol=1e-12)

    def test_padding_rows_ignored(self, rng):
        torch.manual_seed(2)
        model = MotherNet(PRESETS["tiny"]).double()
        X, y = rand_batch(rng, n=10)
        Xp = torch.cat([X, torch.randn(1, 5, 100, dtype=X.dtype)], dim=1)
        yp = torch.cat([y, torch.zeros(1, 5, dtype=y.dtype)], dim=1)
        mask = torch.arange(15)[None] < 10
        torch.testing.assert_close(model(Xp, yp, mask), model(X, y), rtol=1e-10, atol=1e-12)

    def test_absent_classes_pool_to_zero(self, rng):
        H = torch.randn(1, 6, 4, dtype=torch.float64)
        y = torch.tensor([[0, 0, 2, 2, 2, 0]])
        E = class_average_pool(H, y, n_slots=4).reshape(4, 4)
        assert not E[1].any() and not E[3].any()
        torch.testing.assert_close(E[2], H[0, 2:5].mean(dim=0))

    def test_non_finite_inputs(self, tiny_model, rng):
        X, y = rand_batch(rng, dtype=torch.float32)
        X[0, 0, 0] = float("nan")
        with pytest.raises(NumericInputError):
            tiny_model(X, y)

    def test_zero_phi_gives_log_c(self, rng, small_tasks):
        torch.manual_seed(0)
        model = MotherNet(PRESETS["tiny"]).double()
        with torch.no_grad():
            model.decoder_out.weight.zero_()
            model.decoder_out.bias.zero_()
        task = small_tasks[0]
        loss = batch_loss(model, collate([task], dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log(task.n_classes), abs=1e-12)

    def test_unpack_matches_layout(self):
        cfg = ChildConfig(h=8, r=2)
        phi = torch.arange(cfg.phi_len, dtype=torch.float64)[None]
        parts = unpack_phi_torch(cfg, phi)
        assert parts["w1p"].shape == (1, 8, 2)
        assert parts["w1p"][0, 0, 1].item() == 1.0
        assert parts["b1"][0, 0].item() == 16.0
        assert parts["b3"][0, -1].item() == cfg.phi_len - 1


class TestCheckpoint:
    def test_round_trip(self, tiny_model, tmp_path, rng):
        path = tmp_path / "m.mnck"
        save_checkpoint(path, tiny_model, {"step": 3})
        model, extra = load_checkpoint(path)
        assert extra == {"step": 3}
        X, y = rand_batch(rng, dtype=torch.float32)
        with torch.no_grad():
            assert torch.equal(model(X, y), tiny_model(X, y))

    def test_deterministic_bytes(self, tiny_model):
        assert checkpoint_bytes(tiny_model) == checkpoint_bytes(tiny_model)

    def test_bad_magic(self, tmp_path, tiny_model):
        data = bytearray(checkpoint_bytes(tiny_model))
        data[:5] = b"NOPE!"
        path = tmp_path / "bad.mnck"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, tiny_model):
        path = tmp_path / "t.mnck"
        path.write_bytes(checkpoint_bytes(tiny_model)[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestLargeConfig:
    def test_constructs_and_steps(self, small_tasks):
        """The large preset only has to build and take one forward/backward step."""
        torch.manual_seed(0)
        model = MotherNet(PRESETS["paper"])
        assert model.decoder_out.out_features == 34122
        batch = collate([small_tasks[1]])
        loss = batch_loss(model, batch)
        loss.backward()
        assert torch.isfinite(loss)
        assert model.blocks[0].attn.qkv.weight.grad is not None
        assert torch.isfinite(model.decoder_out.weight.grad).all()
