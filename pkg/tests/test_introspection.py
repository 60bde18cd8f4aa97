import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from cler import introspection as intro
from cler.methods import MethodConfig, architecture_for, train_sequence
from cler.model import clone


def _batches(n=3, size=8, classes=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [(torch.rand(size, 3, 8, 8, generator=g), torch.randint(0, classes, (size,), generator=g))
            for _ in range(n)]


def test_alignment_self_is_one(tiny_net):
    b = _batches()
    assert math.isclose(intro.gradient_alignment(tiny_net, b, b), 1.0, abs_tol=1e-9)


class _Scalar(nn.Module):
    """One weight on a one-feature input, two logits: antiparallel gradients under flipped labels."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([0.3]))

    def forward(self, x):
        z = x[:, 0] * self.w
        return torch.stack([z, -z], 1)


def test_alignment_antiparallel():
    net = _Scalar()
    x = torch.ones(4, 1)
    a = [(x, torch.zeros(4, dtype=torch.long))]
    b = [(x, torch.ones(4, dtype=torch.long))]
    assert math.isclose(intro.gradient_alignment(net, a, b), -1.0, abs_tol=1e-9)


def test_alignment_does_not_touch_net(tiny_net):
    before = {k: v.clone() for k, v in tiny_net.state_dict().items()}
    tiny_net.eval()
    intro.gradient_alignment(tiny_net, _batches(seed=1), _batches(seed=2))
    assert not tiny_net.training
    for k, v in tiny_net.state_dict().items():
        assert torch.equal(v, before[k])


def test_cosine_properties():
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal(10_000), rng.standard_normal(10_000)
    assert abs(intro.cosine_similarity(u, v)) < 0.1
    assert math.isclose(intro.cosine_similarity(3 * u, 0.5 * v), intro.cosine_similarity(u, v), rel_tol=1e-12)
    with pytest.raises(ValueError):
        intro.cosine_similarity(np.zeros(3), u[:3])


def test_taylor_scalar_arithmetic():
    net = _Scalar()
    with torch.no_grad():
        net.w.fill_(2.0)
    # loss = 3 * w, so the gradient is 3 and the score (3 * 2)^2
    imp = intro.taylor_importance(net, [(torch.ones(1, 1), torch.zeros(1, dtype=torch.long))],
                                  loss_fn=lambda n, x, y: 3.0 * n.w.sum())
    assert imp.parameter["w"].item() == 36.0


def test_taylor_zero_gradient(tiny_net):
    imp = intro.taylor_importance(tiny_net, _batches(), loss_fn=lambda n, x, y: n(x).sum() * 0.0)
    assert all(torch.count_nonzero(s) == 0 for s in imp.parameter.values())
    assert all(not np.any(f) for f in imp.filter.values())


def test_taylor_translation_invariant(tiny_net):
    base = intro._classification_loss(None)
    a = intro.taylor_importance(tiny_net, _batches(), loss_fn=base)
    b = intro.taylor_importance(tiny_net, _batches(), loss_fn=lambda n, x, y: base(n, x, y) + 17.0)
    for name in a.parameter:
        assert torch.allclose(a.parameter[name], b.parameter[name], rtol=0, atol=0)


def test_taylor_filter_is_sum_of_parameter_scores(tiny_net):
    imp = intro.taylor_importance(tiny_net, _batches())
    conv = "features.0.conv"
    expected = (imp.parameter[conv + ".weight"].sum((1, 2, 3)) + imp.parameter[conv + ".bias"]).double()
    assert np.allclose(imp.filter[conv], expected.numpy(), rtol=1e-6)
    assert "pretext_head.block.conv" not in imp.filter


def test_taylor_top_filter_matters_more():
    data_net = _trained_net()
    batches = _batches(n=4, size=16, seed=5)
    imp = intro.taylor_importance(data_net, batches)
    loss_fn = intro._classification_loss(None)

    def ablate(layer, f):
        m = clone(data_net)
        m.eval()
        conv = dict(m.named_modules())[layer]
        with torch.no_grad():
            conv.weight[f] = 0
            conv.bias[f] = 0
            return sum(loss_fn(m, x, y).item() for x, y in batches) / len(batches)

    layer = "features.0.conv"
    scores = imp.filter[layer]
    top, bottom = int(np.argmax(scores)), int(np.argmin(scores))
    assert abs(ablate(layer, top) - imp.loss) > abs(ablate(layer, bottom) - imp.loss)


def _trained_net():
    from cler.stream import build_class_il_stream, make_synthetic_dataset
    stream = build_class_il_stream(make_synthetic_dataset(4, 30, 8, seed=1, test_per_class=5), 1)
    cfg = MethodConfig("joint_offline", epochs=3, lr=0.05)
    return train_sequence(stream, cfg, 0, arch=architecture_for(stream, cfg, widths=(6, 6, 6))).net


def test_taylor_first_order_magnitude():
    # shrinking a filter by a small factor: the loss change matches -eps * sum(g * w)
    net = _trained_net()
    batches = _batches(n=2, size=16, seed=9)
    imp = intro.taylor_importance(net, batches)
    loss_fn = intro._classification_loss(None)
    layer, f, eps = "features.1.conv", 2, 1e-3
    m = clone(net)
    m.eval()
    conv = dict(m.named_modules())[layer]
    with torch.no_grad():
        conv.weight[f] *= 1 - eps
        conv.bias[f] *= 1 - eps
        actual = sum(loss_fn(m, x, y).item() for x, y in batches) / len(batches) - imp.loss
    predicted = eps * imp.delta[layer][f]
    assert math.isclose(actual, predicted, rel_tol=0.1, abs_tol=1e-6)


def test_above_mean_fraction_examples():
    assert intro.above_mean_fraction([3.0, 3.0, 3.0]) == 0.0
    assert intro.above_mean_fraction([0.0, 10.0]) == 0.5
    assert intro.above_mean_fraction({"a": [0, 10], "b": [1, 1]}) == {"a": 0.5, "b": 0.0}
    with pytest.raises(ValueError):
        intro.above_mean_fraction([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=64))
def test_above_mean_fraction_recount(scores):
    mean = float(np.mean(np.asarray(scores, dtype=np.float64)))
    assert intro.above_mean_fraction(scores) == sum(s > mean for s in scores) / len(scores)


def test_parameter_fraction_covers_conv_layers(tiny_net):
    imp = intro.taylor_importance(tiny_net, _batches())
    fracs = intro.parameter_above_mean_fraction(imp)
    assert set(fracs) == set(imp.filter)
    assert all(0.0 <= v <= 1.0 for v in fracs.values())


def test_geometric_median_examples():
    same = np.ones((5, 2, 3, 3))
    assert intro.geometric_median_similarity(same)[1] == 0.0
    two = np.zeros((2, 4))
    two[1, 0] = 6.0
    idx, g = intro.geometric_median_similarity(two)
    assert g == 3.0 and idx == 0
    with pytest.raises(ValueError):
        intro.geometric_median_similarity(np.zeros((1, 3)))


def test_geometric_median_brute_force_oracle():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((8, 3, 3, 3))
    flat = f.reshape(8, -1).tolist()
    g = [math.fsum(math.sqrt(math.fsum((a - b) * (a - b) for a, b in zip(flat[d], flat[j])))
                   for j in range(8)) / 8 for d in range(8)]
    best = min(range(8), key=lambda d: g[d])
    assert intro.geometric_median_similarity(f) == (best, g[best])


def test_layer_report(tiny_net):
    report = intro.layer_similarity_report(tiny_net)
    assert set(report) == set(tiny_net.conv_layers())


def test_recovery_experiment(small_stream):
    cfg = MethodConfig("er", lr=0.05, buffer_size=20)
    r = train_sequence(small_stream, cfg, 0, arch=architecture_for(small_stream, cfg, widths=(6, 6, 6)))
    before = {k: v.clone() for k, v in r.net.state_dict().items()}
    out = intro.recovery_experiment(r.net, small_stream, 1, drop_fraction=0.5, retrain_batches=5, lr=0.05)
    assert len(out["trace"]) == 6
    assert all(len(v) == 3 for v in out["dropped"].values())
    for k, v in r.net.state_dict().items():
        assert torch.equal(v, before[k])
    noop = intro.recovery_experiment(r.net, small_stream, 1, drop_fraction=0.0, retrain_batches=1)
    assert noop["trace"][0] == noop["pre_drop"]
