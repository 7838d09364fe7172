import math
import struct

import numpy as np
import pytest

from ecss import numcore as nc
from ecss import trainer as tr
from ecss.datapipe import build_samples, split_dataset
from ecss.seqmodel import ModelConfig, count_parameters, init_parameters, param_shapes
from ecss.synthetic import zipf_counts


def _toy_cfg(encoder="mamba", **kw):
    base = dict(encoder=encoder, n_files=8, lookback=6, d_model=8, d_state=4, d_head=2, d_fc=16)
    base.update(kw)
    return ModelConfig(**base)


def _toy_data(seed=0, n_windows=70):
    cm = zipf_counts(n_files=8, n_windows=n_windows, requests_per_window=6, s=1.2, seed=seed)
    return split_dataset(build_samples(cm, 6))


# -------------------------------------------------------------------- adam


def test_zero_gradient_leaves_params():
    p = {"w": nc.parameter([1.0, -2.0])}
    state = tr.adam_step(p, tr.AdamState(), tr.TrainConfig())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_first_step_moves_by_learning_rate():
    p = {"w": nc.parameter([3.0])}
    p["w"].grad = np.array([0.7])
    tr.adam_step(p, tr.AdamState(), tr.TrainConfig(learning_rate=1e-3))
    assert p["w"].data[0] == pytest.approx(3.0 - 1e-3, abs=1e-9)


def test_adam_matches_hand_recurrence():
    cfg = tr.TrainConfig(learning_rate=0.01, grad_clip_norm=1e9)
    p = {"w": nc.parameter([0.5])}
    state = tr.AdamState()
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -0.1, 0.2, 0.05], start=1):
        p["w"].grad = np.array([g])
        tr.adam_step(p, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"].data[0] == pytest.approx(w, abs=1e-15)


def test_adam_is_bitwise_deterministic():
    def run():
        rng = nc.seeded_rng(5)
        p = {"a": nc.parameter(rng.normal(size=(3, 4))), "b": nc.parameter(rng.normal(size=4))}
        state = tr.AdamState()
        for _ in range(10):
            for t in p.values():
                t.grad = rng.normal(size=t.shape)
            tr.adam_step(p, state, tr.TrainConfig())
        return b"".join(t.data.tobytes() for t in p.values())

    assert run() == run()


def test_non_finite_gradient_names_parameter():
    p = {"good": nc.parameter([1.0]), "bad": nc.parameter([1.0])}
    p["bad"].grad = np.array([np.inf])
    with pytest.raises(tr.TrainingDivergedError, match="bad"):
        tr.adam_step(p, tr.AdamState(), tr.TrainConfig())


def test_clip_bounds_global_norm():
    rng = np.random.default_rng(0)
    p = {k: nc.parameter(np.zeros(5)) for k in "abc"}
    for t in p.values():
        t.grad = rng.normal(size=5) * 10
    before = tr.clip_grad_norm(p, 1.0)
    after = math.sqrt(sum(float((t.grad ** 2).sum()) for t in p.values()))
    assert before > 1.0
    assert after <= 1.0 + 1e-9
    small = {"a": nc.parameter([0.0])}
    small["a"].grad = np.array([0.5])
    tr.clip_grad_norm(small, 1.0)
    assert small["a"].grad[0] == 0.5


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)


# ---------------------------------------------------------------- training


@pytest.mark.parametrize("encoder", ["mamba", "transformer"])
def test_training_reduces_loss(encoder):
    ckpt, lines = tr.train(_toy_data(), _toy_cfg(encoder),
                           tr.TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=8, patience=8))
    losses = [float(line.split()[1].split("=")[1]) for line in lines]
    assert losses[-1] < losses[0]
    assert ckpt.meta["epochs_run"] == len(lines) - 1


def test_epoch_log_format():
    _, lines = tr.train(_toy_data(), _toy_cfg(), tr.TrainConfig(max_epochs=2, patience=5))
    assert [line.split()[0] for line in lines] == ["epoch=0", "epoch=1", "epoch=2"]
    for line in lines:
        keys = [tok.split("=")[0] for tok in line.split()]
        assert keys == ["epoch", "train_loss", "val_loss"]


def test_best_checkpoint_has_lowest_logged_val_loss():
    data = _toy_data()
    ckpt, lines = tr.train(data, _toy_cfg(), tr.TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=6, patience=6))
    vals = [float(line.split()[2].split("=")[1]) for line in lines]
    assert ckpt.meta["best_val_loss"] == min(vals)
    assert tr.dataset_loss(data.validation, ckpt.tensors(), ckpt.config) == pytest.approx(min(vals), rel=1e-12)


def test_patience_zero_stops_after_first_non_improving_epoch():
    # a huge step makes validation loss jump after the first update
    _, lines = tr.train(_toy_data(), _toy_cfg(),
                        tr.TrainConfig(learning_rate=5.0, batch_size=64, max_epochs=20, patience=0))
    vals = [float(line.split()[2].split("=")[1]) for line in lines]
    assert len(vals) < 21
    assert vals[-1] >= min(vals[:-1])
    assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))


def test_training_is_reproducible():
    cfg, tcfg = _toy_cfg(), tr.TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=3, seed=7)
    a, la = tr.train(_toy_data(), cfg, tcfg)
    b, lb = tr.train(_toy_data(), cfg, tcfg)
    assert la == lb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_train_requires_validation():
    data = _toy_data()
    data.validation = []
    with pytest.raises(ValueError):
        tr.train(data, _toy_cfg(), tr.TrainConfig(max_epochs=1))


# -------------------------------------------------------------- checkpoint


def _ckpt(encoder="transformer"):
    cfg = _toy_cfg(encoder, n_layers=2)
    params = {k: v.data for k, v in init_parameters(cfg, 1).items()}
    return tr.Checkpoint(cfg, params, {"epochs_run": 3, "best_val_loss": 0.123456789, "seed": 1})


@pytest.mark.parametrize("encoder", ["mamba", "transformer"])
def test_checkpoint_round_trip_is_exact(tmp_path, encoder):
    ckpt = _ckpt(encoder)
    tr.save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = tr.load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == ckpt.config
    assert back.meta["best_val_loss"] == 0.123456789
    assert back.meta["epochs_run"] == 3
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    tr.save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_checkpoint_tensors_match_parameter_counter(tmp_path):
    ckpt = _ckpt("mamba")
    tr.save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = tr.load_checkpoint(tmp_path / "c.ckpt")
    shapes = param_shapes(back.config)
    assert list(back.params) == list(shapes)
    assert {k: v.shape for k, v in back.params.items()} == shapes
    assert sum(v.size for v in back.params.values()) == count_parameters(back.config)[0]


def test_checkpoint_layout(tmp_path):
    tr.save_checkpoint(_ckpt(), tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"ECSSCK01"
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = raw[12:12 + hlen].decode("utf-8")
    assert "model.encoder=transformer" in header.splitlines()
    off = 12 + hlen
    (nlen,) = struct.unpack("<H", raw[off:off + 2])
    assert raw[off + 2:off + 2 + nlen] == b"input_proj.weight"
    rank = raw[off + 2 + nlen]
    dims = struct.unpack("<" + "I" * rank, raw[off + 3 + nlen:off + 3 + nlen + 4 * rank])
    assert dims == (8, 8)


def test_checkpoint_error_kinds(tmp_path):
    tr.save_checkpoint(_ckpt(), tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(tr.BadMagicError, match="bad magic"):
        tr.load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    with pytest.raises(tr.TruncatedCheckpointError):
        tr.load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "tiny.ckpt").write_bytes(raw[:10])
    with pytest.raises(tr.TruncatedCheckpointError):
        tr.load_checkpoint(tmp_path / "tiny.ckpt")
    # header says d_fc=16; claim 32 so every head shape disagrees
    hacked = raw.replace(b"model.d_fc=16", b"model.d_fc=32")
    (tmp_path / "shape.ckpt").write_bytes(hacked)
    with pytest.raises(tr.ShapeMismatchError):
        tr.load_checkpoint(tmp_path / "shape.ckpt")


def test_save_rejects_wrong_shapes(tmp_path):
    ckpt = _ckpt()
    ckpt.params["head.fc2.bias"] = np.zeros(3)
    with pytest.raises(tr.ShapeMismatchError):
        tr.save_checkpoint(ckpt, tmp_path / "x.ckpt")
    assert not (tmp_path / "x.ckpt").exists()
