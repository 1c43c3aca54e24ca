import numpy as np
import pytest

from rgasc.dataio import LabeledExample
from rgasc.features import LogMel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_examples(rng, k, e, per_scene, frames=16, mels=16, prefix="c"):
    """Labelled examples with random features and pseudo labels."""
    out = []
    for j in range(k):
        for i in range(per_scene):
            cid = f"{prefix}{j}_{i:03d}"
            out.append(LabeledExample(cid, LogMel(rng.standard_normal((frames, mels)).astype(np.float32), cid), j,
                                      rng.uniform(0, 1, e)))
    return out


def rel_error(a, n, floor=1e-4):
    """Relative error with a small absolute floor on the denominator.

    Parameters whose true gradient is exactly zero (a conv bias feeding batch
    normalisation) otherwise turn round-off in the numerical estimate into a
    huge ratio.
    """
    return abs(a - n) / max(abs(a), abs(n), floor)


def numeric_grad(f, arr, idx, eps):
    old = arr[idx]
    arr[idx] = old + eps
    plus = f()
    arr[idx] = old - eps
    minus = f()
    arr[idx] = old
    return (plus - minus) / (2 * eps)


def relu_pattern(model):
    """Concatenated ReLU on/off masks from the last train-mode forward pass."""
    from rgasc.nn import ReLU

    layers = []
    for block in model.shared + model.scene_tower.blocks + model.event_tower.blocks:
        layers += [l for l in block.layers if isinstance(l, ReLU)]
    layers += [model.scene_tower.relu, model.event_tower.relu]
    return b"".join(np.packbits(l._cache).tobytes() for l in layers)


def e2e_gradient_check(dtype=np.float64, eps=1e-5, n_coords=240, seed=0, weights=(1, 0.01, 0.5, 0.01),
                       shared_blocks=1, floor=1e-4):
    """Max relative error of composite-loss parameter gradients on a tiny two-tower model.

    2 blocks with channels [4, 8], 8 frames x 16 mels, 3 scenes, 5 events, batch 4.
    Dropout masks are frozen by reseeding the dropout generator on every
    forward pass. A coordinate whose +-eps probes flip any ReLU is a kink,
    where central differences are meaningless; it is replaced by a fresh
    draw. Returns (max error, worst coordinate, coordinates checked, kinks).
    """
    from rgasc.losses import LossWeights, composite_loss_and_grad
    from rgasc.model import ModelConfig, RGASCNet
    from rgasc.relation import RelationMatrix

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(3, 5, total_blocks=2, shared_blocks=shared_blocks, channels=[4, 8], dense_dim=6)
    model = RGASCNet(cfg, seed, dtype)
    x = rng.standard_normal((4, 8, 16))
    ys = np.array([0, 1, 2, 1])
    ye = rng.uniform(0, 1, (4, 5))
    rel = RelationMatrix(rng.uniform(0, 1, (3, 5)))
    w = LossWeights.of(weights)

    def loss():
        out = model.forward(x, "train", np.random.default_rng(99))
        br = composite_loss_and_grad(out.scene_logits, out.event_logits, ys, ye, rel, w, need_grad=False)[0]
        return br.total, relu_pattern(model)

    out = model.forward(x, "train", np.random.default_rng(99))
    _, d_zs, d_ze = composite_loss_and_grad(out.scene_logits, out.event_logits, ys, ye, rel, w)
    model.zero_grad()
    model.backward(d_zs, d_ze)
    grads = {n: g.astype(np.float64) for n, g in model.gradients().items()}
    params = model.parameters()
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    queue = [(names[i], int(rng.integers(sizes[i]))) for i in range(len(names))]  # every tensor at least once
    worst, where, checked, kinks = 0.0, None, 0, 0
    while checked < n_coords:
        if queue:
            name, flat = queue.pop()
        else:
            i = int(rng.choice(len(names), p=sizes / sizes.sum()))
            name, flat = names[i], int(rng.integers(sizes[i]))
        arr = params[name]
        idx = np.unravel_index(flat, arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        plus, pat_plus = loss()
        arr[idx] = old - eps
        minus, pat_minus = loss()
        arr[idx] = old
        if pat_plus != pat_minus:
            kinks += 1
            continue
        err = rel_error(grads[name][idx], (plus - minus) / (2 * eps), floor)
        checked += 1
        if err > worst:
            worst, where = err, (name, idx)
    return worst, where, checked, kinks


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
