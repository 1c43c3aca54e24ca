import json
import struct

import numpy as np
import pytest

from rgasc.losses import composite_loss_and_grad
from rgasc.model import (ModelConfig, RGASCNet, build_model, count_parameters, load_checkpoint,
                         output_spatial_size, read_checkpoint, save_checkpoint)


def tiny(k=3, e=5, shared=1, **kw):
    kw.setdefault("channels", [4, 8])
    return ModelConfig(k, e, total_blocks=2, shared_blocks=shared, dense_dim=kw.pop("dense_dim", 6), **kw)


def test_config_validation():
    with pytest.raises(ValueError, match="shared_blocks"):
        ModelConfig(3, 5, total_blocks=2, shared_blocks=3, channels=[4, 8]).validate()
    with pytest.raises(ValueError, match="channels"):
        ModelConfig(3, 5, total_blocks=2, channels=[4]).validate()
    cfg = ModelConfig(10, 527)
    assert cfg.channels == [64, 128, 256, 512, 512, 512] and cfg.private_blocks == 4
    desk = ModelConfig.desk(3, 5)
    assert (desk.total_blocks, desk.channels, desk.dense_dim) == (2, [16, 32], 64)


@pytest.mark.parametrize("cfg", [tiny(shared=0), tiny(shared=2), ModelConfig(4, 7, total_blocks=3, shared_blocks=1,
                                                                           channels=[2, 3, 5], dense_dim=4)])
def test_parameter_count_formula(cfg):
    assert count_parameters(cfg) == RGASCNet(cfg).n_parameters()


def test_same_seed_same_init():
    a, b = RGASCNet(tiny(), 5), RGASCNet(tiny(), 5)
    for (n, p, _), (_, q, _) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p, q)
    c = RGASCNet(tiny(), 6)
    assert not np.array_equal(a.parameters()["shared.0.conv1.weight"], c.parameters()["shared.0.conv1.weight"])


def test_output_contracts(rng):
    model = RGASCNet(tiny())
    x = rng.standard_normal((5, 16, 16)).astype(np.float32)
    x[1] = x[0]
    out = model.forward(x)
    assert out.scene_probs.shape == (5, 3) and out.event_probs.shape == (5, 5)
    assert out.scene_embedding.shape == (5, 6)
    np.testing.assert_allclose(out.scene_probs.sum(axis=1), 1, atol=1e-6)
    assert np.all((out.event_probs > 0) & (out.event_probs < 1))
    np.testing.assert_array_equal(out.scene_probs[0], out.scene_probs[1])
    again = model.forward(x)
    np.testing.assert_array_equal(again.scene_logits, out.scene_logits)


def test_desk_shapes(rng):
    model = RGASCNet(ModelConfig.desk(3, 5))
    out = model.forward(rng.standard_normal((2, 16, 16)))
    assert out.scene_probs.shape == (2, 3) and out.event_probs.shape == (2, 5)


def test_input_too_small():
    model = RGASCNet(tiny())
    with pytest.raises(ValueError, match="too small"):
        model.forward(np.zeros((1, 3, 16), np.float32))


def test_six_blocks_accept_64_mels_via_identity_pooling(rng):
    cfg = ModelConfig(3, 5, total_blocks=6, shared_blocks=2, channels=[2] * 6, dense_dim=4)
    assert output_spatial_size(64, 64, 6) == (1, 1)
    out = RGASCNet(cfg).forward(rng.standard_normal((2, 64, 64)))
    assert out.scene_probs.shape == (2, 3)


def test_train_mode_needs_rng_for_dropout(rng):
    with pytest.raises(ValueError, match="rng"):
        RGASCNet(tiny()).forward(rng.standard_normal((2, 16, 16)), "train")


def test_disjoint_towers_with_no_shared_blocks(rng):
    model = RGASCNet(tiny(shared=0))
    x = rng.standard_normal((2, 16, 16))
    before = model.forward(x).scene_logits.copy()
    for name, p in model.parameters().items():
        if name.startswith("event."):
            p += 1.0
    np.testing.assert_array_equal(model.forward(x).scene_logits, before)


def test_fully_shared_trunk(rng):
    model = RGASCNet(tiny(shared=2))
    assert model.scene_tower.blocks == [] and model.event_tower.blocks == []
    assert sorted({n.split(".")[0] for n in model.parameters()}) == ["event", "scene", "shared"]


def test_event_only_loss_reaches_trunk_not_scene_tower(rng):
    model = RGASCNet(tiny(shared=1), dtype=np.float64)
    x = rng.standard_normal((4, 16, 16))
    out = model.forward(x, "train", np.random.default_rng(0))
    _, d_zs, d_ze = composite_loss_and_grad(out.scene_logits, out.event_logits, [0, 1, 2, 0],
                                            rng.uniform(0, 1, (4, 5)), None, (0, 0, 1, 0))
    model.zero_grad()
    model.backward(d_zs, d_ze)
    grads = model.gradients()
    assert all(np.any(g) for n, g in grads.items() if n.startswith("shared.") and not n.endswith("conv1.bias")
               and not n.endswith("conv2.bias"))
    assert not any(np.any(g) for n, g in grads.items() if n.startswith("scene."))


def test_checkpoint_round_trip(tmp_path, rng):
    model = RGASCNet(tiny(), 3)
    model.set_normalization(rng.standard_normal(16), rng.uniform(0.5, 2, 16))
    model.forward(rng.standard_normal((4, 16, 16)), "train", np.random.default_rng(0))  # move BN stats
    x = rng.standard_normal((3, 16, 16))
    ref = model.forward(x)
    save_checkpoint(tmp_path / "m.rgsc", model, {"seed": 3, "loss_weights": [1, 0.01, 0.5, 0.01]})
    back = load_checkpoint(tmp_path / "m.rgsc")
    out = back.forward(x)
    np.testing.assert_array_equal(out.scene_logits, ref.scene_logits)
    np.testing.assert_array_equal(out.event_logits, ref.event_logits)
    assert back.meta["loss_weights"] == [1, 0.01, 0.5, 0.01]


def test_checkpoint_layout(tmp_path):
    model = RGASCNet(tiny())
    save_checkpoint(tmp_path / "m.rgsc", model)
    blob = (tmp_path / "m.rgsc").read_bytes()
    assert blob[:4] == b"RGSC"
    version, n = struct.unpack_from("<II", blob, 4)
    header = json.loads(blob[12:12 + n])
    assert version == 1 and header["model_config"]["n_scenes"] == 3
    assert header["tensors"][:2] == ["shared.0.conv1.weight", "shared.0.conv1.bias"]


def test_checkpoint_mismatch_errors(tmp_path):
    save_checkpoint(tmp_path / "m.rgsc", RGASCNet(tiny()))
    with pytest.raises(ValueError, match="n_scenes"):
        load_checkpoint(tmp_path / "m.rgsc", expect=tiny(k=4))
    (tmp_path / "bad.rgsc").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError, match="not an RGSC"):
        read_checkpoint(tmp_path / "bad.rgsc")
    blob = (tmp_path / "m.rgsc").read_bytes()
    (tmp_path / "cut.rgsc").write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "cut.rgsc")


def test_build_model_alias():
    assert build_model(tiny(), 1).n_parameters() == count_parameters(tiny())
