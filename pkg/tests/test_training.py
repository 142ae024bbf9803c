import struct

import numpy as np
import pytest

from condseg import autodiff as ad
from condseg.autodiff import Parameter
from condseg.errors import CheckpointError, CorruptFileError, NumericalError, ShapeError, ValidationError
from condseg.training import (HISTORY_COLUMNS, AdamState, CyclicLRConfig, SegmentationArrays, TrainConfig,
                              adam_step, cyclic_lr, decode_checkpoint, encode_checkpoint, load_checkpoint,
                              read_checkpoint, save_checkpoint, train, validate, write_history_csv)
from condseg.unet import UNetConfig, build_unet
from oracles import adam_scalar, triangular_lr

SCHED = CyclicLRConfig(total_batches=800, lr_min=0.0002, lr_max=0.0008, cycles=8)
ADAM_FROZEN = [0.9000000005, 0.8004122286917928, 0.7015862729460303, 0.603939060573746, 0.507963659264342]


def test_schedule_landmarks():
    assert cyclic_lr(SCHED, 0) == 0.0002
    assert cyclic_lr(SCHED, 50) == 0.0008
    assert cyclic_lr(SCHED, 25) == pytest.approx(0.0005, abs=1e-18)
    assert cyclic_lr(SCHED, 100) == 0.0002


def test_schedule_bit_exact_to_formula():
    for i in range(SCHED.total_batches):
        assert cyclic_lr(SCHED, i) == triangular_lr(i, 800, 0.0002, 0.0008, 8)


def test_schedule_cycle_mean():
    vals = [cyclic_lr(SCHED, i) for i in range(100)]
    assert abs(np.mean(vals) - 0.0005) <= 1e-12
    assert min(vals) >= 0.0002 and max(vals) <= 0.0008


def test_schedule_errors():
    with pytest.raises(ValidationError):
        CyclicLRConfig(10, 1e-3, 1e-4)
    with pytest.raises(ValidationError):
        CyclicLRConfig(10, cycles=0)
    with pytest.raises(ValidationError):
        cyclic_lr(SCHED, 800)


def _scalar_param(value):
    return Parameter("theta", ad.Tensor(np.array([value]), requires_grad=True, dtype=np.float64))


def test_adam_matches_scalar_oracle(f64):
    p, state, traj = _scalar_param(1.0), AdamState(), []
    for _ in range(5):
        p.tensor.grad = 2 * p.tensor.data.copy()
        adam_step(state, [p], 0.1)
        traj.append(float(p.tensor.data[0]))
    want = adam_scalar(1.0, lambda t: 2 * t, 0.1, 5)
    assert max(abs(a - b) for a, b in zip(traj, want)) <= 1e-12
    assert max(abs(a - b) for a, b in zip(traj, ADAM_FROZEN)) <= 1e-12


def test_adam_first_step_is_lr_sized(f64):
    p = _scalar_param(3.0)
    p.tensor.grad = np.array([123.0])
    adam_step(AdamState(), [p], 0.01)
    assert p.tensor.data[0] == pytest.approx(2.99, abs=1e-9)


def test_adam_zero_grad_and_bookkeeping(f64):
    p, s = _scalar_param(1.0), AdamState()
    p.tensor.grad = np.zeros(1)
    adam_step(s, [p], 0.1)
    assert p.tensor.data[0] == 1.0 and s.t == 1 and s.v["theta"].min() >= 0
    q = _scalar_param(0.0)
    q.tensor.grad = None
    with pytest.raises(ValidationError):
        adam_step(s, [q], 0.1)


def _data(n=12, seed=0, meta=False):
    r = np.random.default_rng(seed)
    masks = (r.uniform(size=(n, 1, 8, 8)) > 0.7).astype(np.float32)
    images = (masks * 0.6 + 0.2 + r.normal(0, 0.05, masks.shape)).astype(np.float32)
    m = np.eye(2)[r.integers(0, 2, n)] if meta else None
    return SegmentationArrays(images, masks, m)


def _run(kind="none", epochs=3, **kw):
    cfg = UNetConfig(depth=1, base_channels=4, conditioning=kind, meta_dim=2 if kind in ("sme", "me", "film") else 0)
    meta = cfg.meta_dim > 0
    model = build_unet(cfg, 0)
    return train(model, _data(12, 0, meta), _data(6, 1, meta), TrainConfig(epochs=epochs, batch_size=4, **kw))


def test_training_reduces_loss():
    res = _run(epochs=6, lr_min=2e-3, lr_max=8e-3)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    assert [h["epoch"] for h in res.history] == list(range(1, 7))


def test_best_epoch_parameters_are_kept():
    res = _run("sme", epochs=4)
    best = min(res.history, key=lambda h: h["val_loss"])
    assert res.checkpoint.best_epoch == best["epoch"]
    loss, _ = validate(res.model, _data(6, 1, True))
    assert loss == pytest.approx(best["val_loss"], rel=1e-6)


def test_training_is_deterministic(tmp_path):
    a, b = _run("sme", seed=3), _run("sme", seed=3)
    save_checkpoint(a.checkpoint, tmp_path / "a.ckpt")
    save_checkpoint(b.checkpoint, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    write_history_csv(a.history, tmp_path / "a.csv")
    write_history_csv(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(HISTORY_COLUMNS)
    assert _run("sme", seed=4).checkpoint.params["head.weight"].tobytes() != \
        a.checkpoint.params["head.weight"].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_guard_on_divergence():
    cfg = TrainConfig(epochs=3, batch_size=4, lr_min=1e300, lr_max=1e308)
    with pytest.raises(NumericalError, match="epoch"):
        train(build_unet(UNetConfig(depth=1, base_channels=4), 0), _data(), _data(4, 1), cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_input_reaches_the_guard():
    d = _data()
    d.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        train(build_unet(UNetConfig(depth=1, base_channels=4), 0), d, _data(4, 1), TrainConfig(epochs=1))


def test_dummy_mode_ignores_metadata():
    a = _run("sme", metadata_mode="dummy")
    cfg = UNetConfig(depth=1, base_channels=4, conditioning="sme", meta_dim=2)
    tr, va = _data(12, 0, True), _data(6, 1, True)
    tr.meta = tr.meta[::-1].copy()
    b = train(build_unet(cfg, 0), tr, va, TrainConfig(epochs=3, batch_size=4, metadata_mode="dummy"))
    assert a.checkpoint.params["head.weight"].tobytes() == b.checkpoint.params["head.weight"].tobytes()


def test_train_input_errors():
    model = build_unet(UNetConfig(depth=1, base_channels=4, out_channels=2), 0)
    with pytest.raises(ShapeError):
        train(model, _data(), _data(4, 1), TrainConfig(epochs=1))
    sme = build_unet(UNetConfig(depth=1, base_channels=4, conditioning="sme", meta_dim=2), 0)
    with pytest.raises(ValidationError, match="metadata"):
        train(sme, _data(), _data(4, 1), TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        SegmentationArrays(np.zeros((2, 1, 8, 8)), np.zeros((3, 1, 8, 8)))


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"seed": None}, {"loss": "dice"},
                                {"metadata_mode": "swap"}, {"checkpoint_policy": "best_f1"}])
def test_train_config_validation(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


def test_checkpoint_round_trip_bit_identical_logits(tmp_path):
    res = _run("sme")
    path = save_checkpoint(res.checkpoint, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    probe = _data(4, 9, True)
    with ad.no_grad():
        a = res.model(probe.images, probe.meta).data
        b = back(probe.images, probe.meta).data
    assert a.tobytes() == b.tobytes()
    ck = read_checkpoint(path)
    assert ck.best_epoch == res.checkpoint.best_epoch and ck.rng_state == res.checkpoint.rng_state
    assert ck.train_config["seed"] == 0


def test_checkpoint_corruption():
    buf = encode_checkpoint(_run(epochs=1).checkpoint)
    with pytest.raises(CorruptFileError):
        decode_checkpoint(buf[:-10])
    with pytest.raises(CorruptFileError):
        decode_checkpoint(b"junk")
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0xFF
    with pytest.raises(CorruptFileError, match="checksum"):
        decode_checkpoint(bytes(flipped))
    future = buf[:8] + struct.pack("<H", 99) + buf[10:]
    with pytest.raises(CheckpointError, match="version 99"):
        decode_checkpoint(future)


def test_loading_into_wrong_architecture_names_parameter(tmp_path):
    path = save_checkpoint(_run("se", epochs=1).checkpoint, tmp_path / "se.ckpt")
    with pytest.raises(ShapeError, match="enc0.cond.fc1.weight"):
        load_checkpoint(path, UNetConfig(depth=1, base_channels=4, conditioning="sme", meta_dim=2))
