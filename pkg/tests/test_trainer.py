import json
import numpy as np
import pytest

from rgasc.dataio import CorpusSplit, split_corpus
from rgasc.losses import PURE_ASC, LossWeights
from rgasc.model import ModelConfig, RGASCNet, read_checkpoint
from rgasc.trainer import Adam, EpochRecord, TrainConfig, adam_step, resume, train

from conftest import make_examples


def scalar_adam(theta, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, written independently of the library."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        out.append(theta)
    return out


def test_adam_matches_scalar_reference(rng):
    grads = rng.standard_normal(10)
    p = {"w": np.array([0.7])}
    opt = Adam(p, lr=0.01)
    ref = scalar_adam(0.7, grads)
    for g, r in zip(grads, ref):
        opt.step({"w": np.array([g])})
        assert abs(p["w"][0] - r) < 1e-10
    assert opt.state["t"] == 10


def test_adam_first_step_magnitude():
    p = {"w": np.array([1.0, 1.0])}
    adam_step(p, {"w": np.array([3.0, -0.02])}, {"t": 0, "m": {"w": np.zeros(2)}, "v": {"w": np.zeros(2)}}, 0.001)
    np.testing.assert_allclose(p["w"], [1.0 - 0.001, 1.0 + 0.001], rtol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([2.0])}
    state = {"t": 0, "m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}}
    adam_step(p, {"w": np.zeros(1)}, state, 0.1)
    assert p["w"][0] == 2.0 and state["t"] == 1


def test_adam_rejects_non_finite_gradient():
    p = {"a": np.zeros(1), "b": np.zeros(2)}
    opt = Adam(p)
    with pytest.raises(FloatingPointError, match="'b'"):
        opt.step({"a": np.zeros(1), "b": np.array([0.0, np.nan])})
    assert opt.state["t"] == 0


def test_config_validation_lists_every_problem():
    errs = TrainConfig(epochs=0, batch_size=1, learning_rate=-1).errors()
    assert len(errs) == 3
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0).validate()
    cfg = TrainConfig(loss_weights=(1, 0.01, 0.5, 0.01))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def tiny_setup(rng, weights=PURE_ASC, epochs=3, seed=0, shared=1):
    ex = make_examples(rng, 3, 4, 8)
    split = split_corpus(ex, 0.75, 0)
    cfg = TrainConfig(epochs=epochs, batch_size=6, seed=seed, loss_weights=weights)
    model = RGASCNet(ModelConfig(3, 4, total_blocks=2, shared_blocks=shared, channels=[4, 8], dense_dim=8), seed)
    return model, split, cfg


def test_train_produces_records_and_artifacts(tmp_path, rng):
    model, split, cfg = tiny_setup(rng, LossWeights(1, 0.01, 0.5, 0.01))
    result = train(model, split, None, cfg, tmp_path, meta={"note": "x"})
    assert [r.epoch for r in result.records] == [1, 2, 3]
    assert all(0 <= r.test_acc <= 1 and np.isfinite(r.losses.total) for r in result.records)
    for name in ("final.rgsc", "best.rgsc", "log.jsonl", "metrics.csv"):
        assert (tmp_path / name).exists()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and set(json.loads(lines[0])) >= {"l_scene", "l_s_by_event", "l_event",
                                                              "l_e_by_scene", "total", "seconds"}
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,l_scene,l_s_by_event,l_event,l_e_by_scene,total,test_acc,test_macro_acc"
    meta = read_checkpoint(tmp_path / "final.rgsc")[0]["meta"]
    assert meta["train_config"]["loss_weights"] == [1.0, 0.01, 0.5, 0.01]
    assert meta["train_config"]["seed"] == 0 and meta["note"] == "x"


def test_pure_asc_records_zero_auxiliary_terms(rng):
    model, split, cfg = tiny_setup(rng)
    result = train(model, split, None, cfg)
    for r in result.records:
        assert r.losses.l_event == r.losses.l_s_by_event == r.losses.l_e_by_scene == 0.0


def test_seeded_runs_are_byte_identical(tmp_path, rng):
    outs = []
    for i in range(2):
        model, split, cfg = tiny_setup(np.random.default_rng(5), LossWeights(1, 0.01, 0.5, 0.01))
        train(model, split, None, cfg, tmp_path / f"r{i}")
        outs.append((tmp_path / f"r{i}" / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_resume_matches_straight_run(tmp_path):
    model, split, cfg = tiny_setup(np.random.default_rng(9), LossWeights(1, 0.01, 0.5, 0.01), epochs=4)
    train(model, split, None, cfg, tmp_path / "straight")
    model, split, cfg = tiny_setup(np.random.default_rng(9), LossWeights(1, 0.01, 0.5, 0.01), epochs=2)
    train(model, split, None, cfg, tmp_path / "first")
    cfg.epochs = 4
    resumed = resume(tmp_path / "first" / "final.rgsc", split, cfg, out_dir=tmp_path / "second")
    assert len(resumed.records) == 4
    assert (tmp_path / "second" / "metrics.csv").read_bytes() == (tmp_path / "straight" / "metrics.csv").read_bytes()
    a = read_checkpoint(tmp_path / "second" / "final.rgsc")[1]
    b = read_checkpoint(tmp_path / "straight" / "final.rgsc")[1]
    assert all(a[k].tobytes() == b[k].tobytes() for k in b)


def test_resume_at_final_epoch_is_noop(tmp_path, rng):
    model, split, cfg = tiny_setup(rng, epochs=2)
    train(model, split, None, cfg, tmp_path)
    with pytest.warns(UserWarning, match="nothing to do"):
        result = resume(tmp_path / "final.rgsc", split, cfg)
    assert len(result.records) == 2


def test_resume_rejects_changed_config(tmp_path, rng):
    model, split, cfg = tiny_setup(rng, epochs=1)
    train(model, split, None, cfg, tmp_path)
    cfg.epochs, cfg.batch_size = 3, 4
    with pytest.raises(ValueError, match="batch_size"):
        resume(tmp_path / "final.rgsc", split, cfg)


def test_nan_loss_aborts_with_location(rng):
    model, split, cfg = tiny_setup(rng)
    split.train[2].features.values[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 1, batch"):
        train(model, split, None, cfg)


def test_every_gradient_written_each_step(rng):
    model, split, cfg = tiny_setup(rng, LossWeights(1, 0.01, 0.5, 0.01))
    calls = []
    original = model.backward

    def instrumented(d_zs, d_ze):
        for g in model.gradients().values():
            g[...] = np.nan  # stale values would survive a missed write
        original(d_zs, d_ze)
        calls.append(all(np.all(np.isfinite(g)) for g in model.gradients().values()))

    model.backward = instrumented
    train(model, split, None, cfg)
    assert calls and all(calls)


def test_last_partial_batch_dropped(rng):
    model, split, cfg = tiny_setup(rng)
    assert len(split.train) == 18
    cfg.batch_size = 4
    seen = []
    original = model.forward

    def spy(x, mode="eval", rng=None):
        if mode == "train":
            seen.append(len(x))
        return original(x, mode, rng)

    model.forward = spy
    train(model, CorpusSplit(split.train, []), None, TrainConfig(epochs=1, batch_size=4))
    assert seen == [4, 4, 4, 4]


def test_train_rejects_bad_inputs(rng):
    model, split, cfg = tiny_setup(rng)
    with pytest.raises(ValueError, match="epochs"):
        train(model, split, None, TrainConfig(epochs=0))
    with pytest.raises(ValueError, match="smaller than batch_size"):
        train(model, split, None, TrainConfig(epochs=1, batch_size=64))


def test_record_round_trip():
    r = EpochRecord.from_dict({"epoch": 2, "l_scene": 1.0, "l_s_by_event": 0.0, "l_event": 0.5, "l_e_by_scene": 0.1,
                               "total": 1.3, "test_acc": 0.5, "test_macro_acc": 0.4, "seconds": 0.2})
    assert EpochRecord.from_dict(r.to_dict()) == r
