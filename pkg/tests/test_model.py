"""Classifier tests: topology shapes, residual path, training loop, ECGN I/O."""

import numpy as np
import pytest

from ecgscreen.errors import (
    BadMagic,
    ConfigInvalid,
    EmptyTrainingSet,
    LabelWidthMismatch,
    TensorShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)
from ecgscreen.model import (
    BlockSpec,
    EcgResNet,
    ModelConfig,
    TrainConfig,
    TrainData,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from ecgscreen.nn import ops
from ecgscreen.nn.optim import AdamState
from ecgscreen.nn.tensor import Graph, Tensor
from ecgscreen.signals import NormalizationStats


def _tiny_cfg(**overrides):
    base = dict(
        input_len=16,
        n_labels=3,
        stem=(4, 3),
        blocks=(BlockSpec(4, 3, 2), BlockSpec(5, 3, 2),
                BlockSpec(5, 3, 1), BlockSpec(6, 3, 2)),
        dropout_rate=0.0,
        embed_dim=4,
        input_leads=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _data(rng, cfg, n=10, seed_labels=True):
    labels = (rng.random((n, cfg.n_labels)) < 0.4).astype(np.float32)
    if seed_labels:
        labels[0] = 1.0
        labels[1] = 0.0
    return TrainData(
        signal=rng.standard_normal((n, cfg.input_leads, cfg.input_len)).astype(np.float32),
        demo=rng.standard_normal((n, 2)).astype(np.float32),
        labels=labels,
        ecg_ids=tuple(range(1, n + 1)),
        patient_ids=tuple(range(101, 101 + n)),
    )


class TestConfig:
    @pytest.mark.parametrize(
        "input_len,subsamples",
        [
            (1000, (4, 4, 4, 4)),
            (997, (4, 4, 4, 4)),
            (1000, (2, 3, 4, 5)),
            (63, (2, 2, 2, 2)),
            (16, (1, 1, 1, 1)),
            (7, (3, 2, 1, 2)),
        ],
    )
    def test_block_lengths_follow_ceil_rule(self, input_len, subsamples):
        cfg = _tiny_cfg(
            input_len=input_len,
            blocks=tuple(BlockSpec(4, 3, s) for s in subsamples),
        )
        lengths = cfg.block_lengths()
        assert lengths[0] == input_len
        for prev, got, s in zip(lengths, lengths[1:], subsamples):
            assert got == -(-prev // s)
        assert cfg.flat_features == 4 * lengths[-1]

    def test_default_desk_lengths(self):
        cfg = ModelConfig(input_len=1000, n_labels=5)
        assert cfg.block_lengths() == [1000, 250, 63, 16, 4]
        assert cfg.flat_features == 64 * 4

    def test_exactly_four_blocks_required(self):
        with pytest.raises(ConfigInvalid):
            _tiny_cfg(blocks=(BlockSpec(4, 3, 2),) * 3)
        with pytest.raises(ConfigInvalid):
            _tiny_cfg(blocks=(BlockSpec(4, 3, 2),) * 5)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigInvalid):
            BlockSpec(4, 4, 2)
        with pytest.raises(ConfigInvalid):
            _tiny_cfg(stem=(4, 2))

    def test_json_round_trip(self):
        cfg = _tiny_cfg()
        assert ModelConfig.from_json(cfg.to_json()) == cfg


class TestForward:
    def test_output_shape_across_configs(self, rng):
        for input_len in (16, 33, 100):
            cfg = _tiny_cfg(input_len=input_len)
            model = EcgResNet(cfg, seed=1)
            x = Tensor(rng.standard_normal((5, 3, input_len)).astype(np.float32))
            demo = Tensor(np.zeros((5, 2), np.float32))
            assert model.forward(x, demo, train=False).shape == (5, cfg.n_labels)

    def test_zero_input_gives_half_probability(self):
        cfg = _tiny_cfg()
        model = EcgResNet(cfg, seed=0)
        data = TrainData(
            signal=np.zeros((4, 3, 16), np.float32),
            demo=np.zeros((4, 2), np.float32),
            labels=np.zeros((4, 3), np.float32),
            ecg_ids=(1, 2, 3, 4),
            patient_ids=(1, 2, 3, 4),
        )
        probs = predict(model, data)
        assert np.array_equal(probs, np.full((4, 3), 0.5, np.float32))

    def test_head_parameter_count(self):
        cfg = _tiny_cfg(embed_dim=7, n_labels=11)
        model = EcgResNet(cfg)
        w = model.params["head.w"]
        b = model.params["head.b"]
        assert w.data.shape == (7 + 2, 11)
        assert w.size + b.size == (7 + 2) * 11 + 11

    def test_projection_only_when_channels_change(self):
        cfg = _tiny_cfg(blocks=(BlockSpec(4, 3, 2), BlockSpec(5, 3, 2),
                                BlockSpec(5, 3, 1), BlockSpec(6, 3, 2)))
        model = EcgResNet(cfg)
        assert "block1.proj.w" not in model.params   # stem 4 -> 4
        assert "block2.proj.w" in model.params       # 4 -> 5
        assert "block3.proj.w" not in model.params   # 5 -> 5
        assert "block4.proj.w" in model.params       # 5 -> 6

    def test_zeroed_conv_path_collapses_blocks_to_identity(self, rng):
        # same-width, stride-1 blocks with a silent conv branch reduce to
        # relu(bn(...)) of the stem output; eval-mode unit BN only scales
        # by s = (1 + eps) ** -0.5 per layer
        cfg = _tiny_cfg(blocks=tuple(BlockSpec(4, 3, 1) for _ in range(4)))
        model = EcgResNet(cfg, seed=3)
        for i in range(1, 5):
            model.params[f"block{i}.conv2.w"].data[...] = 0.0
            model.params[f"block{i}.conv2.b"].data[...] = 0.0
        x = rng.standard_normal((2, 3, 16)).astype(np.float32)
        demo = rng.standard_normal((2, 2)).astype(np.float32)
        logits = model.forward(Tensor(x), Tensor(demo), train=False).data

        s = (1.0 + 1e-5) ** -0.5
        stem = ops.conv1d(Tensor(x), model.params["stem.conv.w"],
                          model.params["stem.conv.b"], stride=1, pad=1).data
        feats = np.maximum(stem, 0.0) * s**5
        flat = feats.reshape(2, -1)
        embed = np.maximum(flat @ model.params["embed.w"].data
                           + model.params["embed.b"].data, 0.0)
        manual = (np.concatenate([embed, demo], axis=1) @ model.params["head.w"].data
                  + model.params["head.b"].data)
        assert np.allclose(logits, manual, atol=1e-5)

    def test_eval_mode_is_row_independent(self, rng):
        cfg = _tiny_cfg()
        model = EcgResNet(cfg, seed=2)
        data = _data(rng, cfg, n=9)
        assert np.array_equal(predict(model, data, batch_size=2),
                              predict(model, data, batch_size=9))


def end_to_end_gradient_worst(rng, n_probes=48, tol=1e-3) -> float:
    """Full-model central-difference check in float64; returns worst rel err."""
    cfg = _tiny_cfg(input_len=8, dropout_rate=0.2)
    model = EcgResNet(cfg, seed=5)
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    for name in model.buffers:
        model.buffers[name] = model.buffers[name].astype(np.float64)

    x = rng.standard_normal((3, 3, 8))
    demo = rng.standard_normal((3, 2))
    y = (rng.random((3, 3)) < 0.5).astype(np.float64)

    def loss_value() -> float:
        buffers = {k: v.copy() for k, v in model.buffers.items()}
        logits = model.forward(Tensor(x), Tensor(demo), train=True, step=7)
        out = ops.bce_with_logits(logits, y).data.item()
        for k in model.buffers:  # keep running stats fixed across probes
            model.buffers[k][...] = buffers[k]
        return out

    model.zero_grads()
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    with Graph() as g:
        logits = model.forward(Tensor(x), Tensor(demo), train=True, step=7)
        loss = ops.bce_with_logits(logits, y)
        g.backward(loss)
    for k in model.buffers:
        model.buffers[k][...] = buffers[k]

    h = 1e-5
    names = list(model.params)
    coord_rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(n_probes):
        name = names[coord_rng.integers(len(names))]
        p = model.params[name]
        flat = int(coord_rng.integers(p.size))
        idx = np.unravel_index(flat, p.data.shape)
        assert p.grad is not None, f"{name} got no gradient"
        original = p.data[idx]
        p.data[idx] = original + h
        up = loss_value()
        p.data[idx] = original - h
        down = loss_value()
        p.data[idx] = original
        numeric = (up - down) / (2 * h)
        analytic = float(p.grad[idx])
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
        assert err < tol, f"{name}{idx}: {analytic} vs {numeric} (err {err:.2g})"
    return worst


class TestEndToEndGradients:
    def test_tiny_model_central_difference(self, rng):
        assert end_to_end_gradient_worst(rng) < 1e-3


class TestTraining:
    def test_identical_seeds_reproduce_loss_curve_and_predictions(self, rng):
        cfg = _tiny_cfg()
        data = _data(rng, cfg, n=20)
        val = _data(rng, cfg, n=8)
        tcfg = TrainConfig(lr=0.01, batch_size=8, max_epochs=3, patience=0, seed=4)
        runs = []
        for _ in range(2):
            model = EcgResNet(cfg, seed=4)
            result = train(model, data, val, tcfg)
            runs.append((result.history, predict(model, val)))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_different_seed_changes_training(self, rng):
        cfg = _tiny_cfg()
        data = _data(rng, cfg, n=20)
        tcfg_a = TrainConfig(lr=0.01, batch_size=8, max_epochs=2, seed=4)
        tcfg_b = TrainConfig(lr=0.01, batch_size=8, max_epochs=2, seed=5)
        model_a = EcgResNet(cfg, seed=4)
        model_b = EcgResNet(cfg, seed=5)
        ra = train(model_a, data, None, tcfg_a)
        rb = train(model_b, data, None, tcfg_b)
        assert ra.history != rb.history

    def test_loss_decreases_on_learnable_data(self, rng):
        cfg = _tiny_cfg(n_labels=1)
        n = 30
        signal = rng.standard_normal((n, 3, 16)).astype(np.float32)
        labels = (signal[:, 0, :4].mean(axis=1) > 0).astype(np.float32)[:, None]
        data = TrainData(signal=signal, demo=np.zeros((n, 2), np.float32),
                         labels=labels, ecg_ids=tuple(range(n)),
                         patient_ids=tuple(range(n)))
        model = EcgResNet(cfg, seed=0)
        result = train(model, data, None,
                       TrainConfig(lr=0.01, batch_size=10, max_epochs=12, seed=0))
        assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]

    def test_zero_lr_freezes_parameters(self, rng):
        cfg = _tiny_cfg()
        data = _data(rng, cfg, n=12)
        model = EcgResNet(cfg, seed=1)
        before = {k: p.data.copy() for k, p in model.params.items()}
        train(model, data, None,
              TrainConfig(lr=0.0, batch_size=6, max_epochs=2, seed=1))
        for k, p in model.params.items():
            assert np.array_equal(before[k], p.data), k

    def test_no_validation_runs_exactly_max_epochs(self, rng):
        cfg = _tiny_cfg()
        data = _data(rng, cfg, n=12)
        model = EcgResNet(cfg, seed=1)
        result = train(model, data, None,
                       TrainConfig(lr=0.001, batch_size=6, max_epochs=5, patience=1,
                                   seed=1))
        assert [h["epoch"] for h in result.history] == [1, 2, 3, 4, 5]
        assert result.best_epoch == 5
        assert result.best_val_loss is None

    def test_early_stopping_restores_best_snapshot(self, rng):
        cfg = _tiny_cfg()
        data = _data(rng, cfg, n=20)
        val = _data(rng, cfg, n=8)
        # large lr so val loss moves both ways quickly
        tcfg = TrainConfig(lr=0.05, batch_size=8, max_epochs=20, patience=2, seed=3)
        model = EcgResNet(cfg, seed=3)
        result = train(model, data, val, tcfg)
        val_losses = [h["val_loss"] for h in result.history]
        best = min(val_losses)
        assert result.best_val_loss == best
        assert result.history[result.best_epoch - 1]["val_loss"] == best
        from ecgscreen.model import _mean_loss
        assert _mean_loss(model, val, 8) == pytest.approx(best, abs=1e-7)
        if len(val_losses) < tcfg.max_epochs:
            tail = val_losses[result.best_epoch:]
            assert len(tail) == tcfg.patience

    def test_patience_zero_disables_early_stopping(self, rng):
        cfg = _tiny_cfg()
        data = _data(rng, cfg, n=16)
        val = _data(rng, cfg, n=8)
        tcfg = TrainConfig(lr=0.05, batch_size=8, max_epochs=6, patience=0, seed=3)
        result = train(EcgResNet(cfg, seed=3), data, val, tcfg)
        assert len(result.history) == 6

    def test_empty_training_set_raises(self, rng):
        cfg = _tiny_cfg()
        empty = TrainData(
            signal=np.empty((0, 3, 16), np.float32),
            demo=np.empty((0, 2), np.float32),
            labels=np.empty((0, 3), np.float32),
            ecg_ids=(),
            patient_ids=(),
        )
        with pytest.raises(EmptyTrainingSet):
            train(EcgResNet(cfg), empty, None, TrainConfig(max_epochs=1))

    def test_label_width_mismatch_raises(self, rng):
        cfg = _tiny_cfg(n_labels=3)
        bad = _data(rng, _tiny_cfg(n_labels=2), n=6)
        with pytest.raises(LabelWidthMismatch):
            train(EcgResNet(cfg), bad, None, TrainConfig(max_epochs=1))


class TestCheckpoint:
    def _stats(self):
        return NormalizationStats(
            lead_mean=np.arange(12, dtype=np.float64),
            lead_std=np.ones(12) * 2.0,
            age_mean=55.5,
            age_std=12.25,
        )

    def test_round_trip_bit_exact(self, tmp_path, rng):
        cfg = _tiny_cfg()
        model = EcgResNet(cfg, seed=8)
        data = _data(rng, cfg, n=10)
        train(model, data, None, TrainConfig(lr=0.01, batch_size=5, max_epochs=2, seed=8))
        path = tmp_path / "model.ecgn"
        save_checkpoint(model, path, stats=self._stats(),
                        metadata={"stage": 1, "best_epoch": 2})
        loaded, stats, metadata, adam = load_checkpoint(path)
        assert adam is None
        assert metadata == {"stage": 1, "best_epoch": 2}
        assert stats.age_mean == 55.5
        for name, p in model.params.items():
            assert np.array_equal(loaded.params[name].data, p.data), name
        for name, buf in model.buffers.items():
            assert np.array_equal(loaded.buffers[name], buf), name
        assert np.array_equal(predict(loaded, data), predict(model, data))

    def test_save_is_deterministic(self, tmp_path):
        model = EcgResNet(_tiny_cfg(), seed=8)
        p1, p2 = tmp_path / "a.ecgn", tmp_path / "b.ecgn"
        save_checkpoint(model, p1, metadata={"k": 1})
        save_checkpoint(model, p2, metadata={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_adam_state_round_trip(self, tmp_path, rng):
        cfg = _tiny_cfg()
        model = EcgResNet(cfg, seed=8)
        state = AdamState(model.parameter_list(), lr=0.003)
        grads = [np.ones_like(p.data) for p in model.parameter_list()]
        from ecgscreen.nn.optim import adam_step
        adam_step(state, grads)
        adam_step(state, grads)
        path = tmp_path / "with_adam.ecgn"
        save_checkpoint(model, path, adam=state)
        _, _, _, loaded = load_checkpoint(path)
        assert loaded.t == 2 and loaded.lr == 0.003
        for a, b in zip(loaded.m, state.m):
            assert np.allclose(a, b, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ecgn"
        save_checkpoint(EcgResNet(_tiny_cfg()), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "x.ecgn"
        save_checkpoint(EcgResNet(_tiny_cfg()), path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "x.ecgn"
        save_checkpoint(EcgResNet(_tiny_cfg()), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 5])
        with pytest.raises(TruncatedFile):
            load_checkpoint(path)

    def test_snapshot_shape_mismatch(self):
        model = EcgResNet(_tiny_cfg())
        snap = model.state_snapshot()
        snap["head.w"] = np.zeros((1, 1), np.float32)
        with pytest.raises(TensorShapeMismatch):
            model.load_snapshot(snap)
