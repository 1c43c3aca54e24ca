import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rgasc.losses as losses
from rgasc.losses import (BEST_REPORTED, PURE_ASC, LossBreakdown, LossWeights, composite_loss,
                          composite_loss_and_grad, event_by_scene_loss, event_loss, scene_by_event_loss, scene_loss)
from rgasc.nn import sigmoid, softmax
from rgasc.relation import RelationMatrix, infer_event_from_scene, infer_scene_from_event

from conftest import e2e_gradient_check


def test_scene_loss_examples():
    assert scene_loss([0.1, 0.8, 0.1], [0, 1, 0]) == pytest.approx(-math.log(0.8), abs=1e-6)
    assert scene_loss([0.1, 0.8, 0.1], [0, 1, 0]) == pytest.approx(0.22314, abs=1e-5)
    assert scene_loss([0, 1, 0], [0, 1, 0]) == 0.0
    assert scene_loss(np.full(5, 0.2), [0, 0, 1, 0, 0]) == pytest.approx(math.log(5))
    with pytest.raises(ValueError, match="one-hot"):
        scene_loss([0.5, 0.5], [0.5, 0.5])


def test_scene_loss_clamps_zero_probability():
    assert scene_loss([1.0, 0.0], [0, 1]) == pytest.approx(-math.log(1e-7))


def test_event_loss_examples():
    assert event_loss([0.9, 0.1], [1, 0]) == pytest.approx(-2 * math.log(0.9), abs=1e-6)
    assert event_loss([0.9, 0.1], [1, 0]) == pytest.approx(0.21072, abs=1e-5)
    assert event_loss(np.full(7, 0.5), np.full(7, 0.5)) == pytest.approx(7 * math.log(2))
    assert math.isfinite(event_loss([0.0, 1.0], [1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(y=st.floats(0.01, 0.99))
def test_event_loss_minimised_at_soft_target(y):
    grid = np.linspace(0.001, 0.999, 999)
    values = [event_loss([p], [y]) for p in grid]
    assert abs(grid[int(np.argmin(values))] - y) <= 0.0015


def test_mse_examples(rng):
    assert event_by_scene_loss([0.3, 0.4], [0.3, 0.4]) == 0.0
    assert event_by_scene_loss([1, 0], [0, 1]) == pytest.approx(1.0)
    assert scene_by_event_loss([1, 0], [0.5, 0.5]) == pytest.approx(0.25)
    a, b = rng.uniform(0, 1, 9), rng.uniform(0, 1, 9)
    loop = sum((a[i] - b[i]) ** 2 for i in range(9)) / 9
    assert event_by_scene_loss(a, b) == pytest.approx(loop, abs=1e-7)
    assert scene_by_event_loss(a, b) == pytest.approx(loop, abs=1e-7)
    with pytest.raises(ValueError):
        event_by_scene_loss([0.1, 0.2], [0.1])


def test_batch_reduction_is_mean_of_examples(rng):
    p = rng.dirichlet(np.ones(4), size=6)
    y = np.eye(4)[rng.integers(0, 4, 6)]
    assert scene_loss(p, y) == pytest.approx(np.mean([scene_loss(p[i], y[i]) for i in range(6)]))
    q, t = rng.uniform(0.01, 0.99, (6, 5)), rng.uniform(0, 1, (6, 5))
    assert event_loss(q, t) == pytest.approx(np.mean([event_loss(q[i], t[i]) for i in range(6)]))


def test_weights_validation():
    assert LossWeights().as_tuple() == (1.0, 1.0, 1.0, 1.0)
    assert BEST_REPORTED.as_tuple() == (1.0, 0.01, 0.5, 0.01)
    with pytest.raises(ValueError):
        LossWeights(1, -0.1, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(1, float("inf"), 0, 0)


def random_case(rng, b=4, k=3, e=5):
    return (rng.standard_normal((b, k)) * 2, rng.standard_normal((b, e)) * 2, rng.integers(0, k, b),
            rng.uniform(0, 1, (b, e)), RelationMatrix(rng.uniform(0, 1, (k, e))))


def test_breakdown_matches_manual_sum_random(rng):
    for _ in range(100):
        zs, ze, ys, ye, rel = random_case(rng)
        w = rng.uniform(0, 2, 4) * (rng.random(4) < 0.8)
        br = composite_loss(zs, ze, ys, ye, rel, w)
        manual = w[0] * br.l_scene + w[1] * br.l_s_by_event + w[2] * br.l_event + w[3] * br.l_e_by_scene
        assert abs(br.total - manual) <= 1e-6


def test_breakdown_terms_match_direct_evaluation(rng):
    zs, ze, ys, ye, rel = random_case(rng)
    br = composite_loss(zs, ze, ys, ye, rel, LossWeights())
    ps, pe = softmax(zs), sigmoid(ze)
    assert br.l_scene == pytest.approx(scene_loss(ps, np.eye(3)[ys]))
    assert br.l_event == pytest.approx(event_loss(pe, ye))
    assert br.l_e_by_scene == pytest.approx(event_by_scene_loss(pe, infer_event_from_scene(ps, rel)))
    assert br.l_s_by_event == pytest.approx(scene_by_event_loss(ps, infer_scene_from_event(pe, rel)))


def test_linearity_in_weights(rng):
    zs, ze, ys, ye, rel = random_case(rng)
    a, b = rng.uniform(0, 1, 4), rng.uniform(0, 1, 4)
    ta = composite_loss(zs, ze, ys, ye, rel, a).total
    tb = composite_loss(zs, ze, ys, ye, rel, b).total
    assert composite_loss(zs, ze, ys, ye, rel, a + b).total == pytest.approx(ta + tb, abs=1e-6)


def test_special_weightings(rng):
    zs, ze, ys, ye, rel = random_case(rng)
    br = composite_loss(zs, ze, ys, ye, rel, PURE_ASC)
    assert br.total == br.l_scene and br.l_event == br.l_s_by_event == br.l_e_by_scene == 0
    assert composite_loss(zs, ze, ys, ye, rel, (0, 0, 0, 0)).total == 0
    br = composite_loss(zs, ze, ys, ye, rel, (0, 1, 0, 1))
    assert br.l_scene == 0 and br.l_event == 0 and br.total == br.l_s_by_event + br.l_e_by_scene


def test_zero_weight_terms_never_evaluated(rng, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("evaluated a zero-weight term")

    for name in ("event_loss", "event_by_scene_loss", "scene_by_event_loss"):
        monkeypatch.setattr(losses, name, boom)
    zs, ze, ys, ye, rel = random_case(rng)
    br, d_zs, d_ze = composite_loss_and_grad(zs, ze, ys, ye, None, PURE_ASC)
    assert br.total > 0 and not np.any(d_ze)


def test_relation_needed_for_cross_terms(rng):
    zs, ze, ys, ye, _ = random_case(rng)
    with pytest.raises(ValueError, match="relation"):
        composite_loss(zs, ze, ys, ye, None, BEST_REPORTED)


def numeric_logit_grad(fn, z, eps=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        old = z[idx]
        z[idx] = old + eps
        plus = fn()
        z[idx] = old - eps
        minus = fn()
        z[idx] = old
        g[idx] = (plus - minus) / (2 * eps)
    return g


@pytest.mark.parametrize("weights", [(1, 0, 0, 0), (0, 0, 1, 0), (0, 1, 0, 0), (0, 0, 0, 1), (1, 0.01, 0.5, 0.01),
                                     (0.3, 2.0, 0.7, 1.5)])
def test_logit_gradients_match_finite_differences(rng, weights):
    zs, ze, ys, ye, rel = random_case(rng)
    _, d_zs, d_ze = composite_loss_and_grad(zs, ze, ys, ye, rel, weights)
    fn = lambda: composite_loss(zs, ze, ys, ye, rel, weights).total
    np.testing.assert_allclose(d_zs, numeric_logit_grad(fn, zs), atol=1e-8)
    np.testing.assert_allclose(d_ze, numeric_logit_grad(fn, ze), atol=1e-8)


def test_stop_gradient_freezes_reference(rng):
    zs, ze, ys, ye, rel = random_case(rng)
    # event-by-scene only: the event prediction is a fixed reference, so no gradient reaches event logits
    _, d_zs, d_ze = composite_loss_and_grad(zs, ze, ys, ye, rel, (0, 0, 0, 1), stop_gradient=True)
    assert not np.any(d_ze) and np.any(d_zs)
    _, d_zs, d_ze = composite_loss_and_grad(zs, ze, ys, ye, rel, (0, 1, 0, 0), stop_gradient=True)
    assert not np.any(d_zs) and np.any(d_ze)


def test_end_to_end_gradient_check_float64():
    worst, where, checked, _ = e2e_gradient_check(seed=1, n_coords=120)
    assert checked == 120
    assert worst <= 1e-6, where


def test_breakdown_dict():
    br = LossBreakdown(1.0, 2.0, 3.0, 4.0, 10.0)
    assert br.as_dict() == {"l_scene": 1.0, "l_s_by_event": 2.0, "l_event": 3.0, "l_e_by_scene": 4.0, "total": 10.0}
