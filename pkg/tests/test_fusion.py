import numpy as np
import pytest

from mtaffect.fusion import FusionEnsemble, FusionError, calibrate_weights, decision_fuse, load_manifest, save_manifest
from mtaffect.gradcheck import check_gradients
from mtaffect.metrics import ccc, ccc_loss
from mtaffect.tensor import ShapeError, backward, precision

from conftest import tiny_model
from test_zoo import inputs


def test_weighted_average_hand_case():
    fused = decision_fuse([[0.4, 0.4], [0.1, 0.1]], [[0.5, 0.5], [0.25, 0.25]])
    assert fused[0] == 0.3 and fused[1] == 0.3
    assert decision_fuse([[0.4], [0.1]], [0.5, 0.25])[0] == 0.3


def test_single_member_and_agreeing_members():
    np.testing.assert_array_equal(decision_fuse([[0.2, 0.7]], [[0.3, 0.9]]), [0.2, 0.7])
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(decision_fuse(np.full((4, 2), 0.35), rng.uniform(0.1, 1, (4, 2))), [0.35, 0.35],
                               rtol=1e-15)


def test_convex_hull_and_weight_scaling_on_random_draws():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        m = int(rng.integers(1, 6))
        est = rng.uniform(-1, 1, size=(m, 7, 2))
        w = rng.uniform(0.01, 1, size=(m, 2))
        fused = decision_fuse(est, w)
        assert np.all(fused >= est.min(axis=0) - 1e-12) and np.all(fused <= est.max(axis=0) + 1e-12)
        np.testing.assert_allclose(decision_fuse(est, w * rng.uniform(0.1, 10)), fused, atol=1e-12)


def test_negative_weights_are_clamped():
    fused = decision_fuse([[0.2, 0.2], [0.9, 0.9]], [[0.5, 0.5], [-0.4, 0.5]])
    np.testing.assert_allclose(fused, [0.2, 0.55])
    with pytest.raises(FusionError, match="no informative member"):
        decision_fuse([[0.2, 0.2], [0.9, 0.9]], [[-0.1, 0.5], [0.0, 0.5]])
    with pytest.raises(FusionError):
        decision_fuse([[0.2, 0.2]], [[np.nan, 0.5]])
    with pytest.raises(FusionError):
        decision_fuse([[0.2, 0.2], [0.1, 0.1]], [[0.5, 0.5]])


def test_calibrated_weights_are_metric_ccc_bit_exactly():
    rng = np.random.default_rng(2)
    labels = np.stack([rng.uniform(-1, 1, 20), rng.uniform(0, 1, 20)], axis=1)
    members = np.stack([labels + rng.normal(0, s, labels.shape) for s in (0.1, 0.5, 1.0)])
    w = calibrate_weights(members, labels)
    for k in range(3):
        for d in range(2):
            assert w[k, d] == ccc(labels[:, d], members[k, :, d])


def test_exact_and_anti_members():
    labels = np.array([[0.1, 0.2], [0.5, 0.9], [-0.4, 0.3], [0.8, 0.5]])
    anti = labels.mean(axis=0) - (labels - labels.mean(axis=0))
    w = calibrate_weights(np.stack([labels, anti]), labels)
    np.testing.assert_allclose(w[0], [1.0, 1.0], atol=1e-7)
    assert np.all(w[1] < 0)
    np.testing.assert_allclose(decision_fuse(np.stack([labels, anti]), w), labels)


def test_ensemble_construction_errors():
    with pytest.raises(FusionError):
        FusionEnsemble([], "rnn")
    with pytest.raises(FusionError):
        FusionEnsemble([tiny_model()], "attention")
    ens = FusionEnsemble([tiny_model(seq_len=4), tiny_model(seq_len=5)], "fc")
    with pytest.raises(ShapeError):
        ens.seq_len
    with pytest.raises(FusionError):
        FusionEnsemble([tiny_model()], "none").forward(None, None)


@pytest.mark.parametrize("head", ["rnn", "fc"])
def test_fused_forward_shapes(rng, head):
    members = [tiny_model(), tiny_model("concat-1rnn", seed=1)]
    ens = FusionEnsemble(members, head, units=7)
    assert ens.input_width == sum(m.feature_width for m in members)
    frames, lms = inputs(rng)
    assert ens(frames, lms).shape == (4, 3, 2)
    assert ens.head_parameter_count() == sum(p.size for p in ens.head_params.values())
    assert ens.parameter_count() == ens.head_parameter_count() + sum(m.parameter_count() for m in members)
    one = FusionEnsemble([tiny_model()], head, units=7)
    assert one(frames, lms).shape == members[0](frames, lms).shape


def test_zeroed_member_gets_no_gradient(rng):
    members = [tiny_model(), tiny_model(seed=1)]
    ens = FusionEnsemble(members, "fc", units=5)
    frames, lms = inputs(rng)
    labels = rng.uniform(0, 1, size=(12, 2))
    params = ens.parameters()
    grads = backward(ccc_loss(labels, ens(frames, lms, member_scale=[1.0, 0.0]).reshape(12, 2)), params)
    owner = {id(p): k for k, m in enumerate(members) for p in m.parameters()}
    for p, g in zip(params, grads):
        if owner.get(id(p)) == 1:
            assert not g.any(), p.name
        elif owner.get(id(p)) == 0 and p.name.startswith("head/rnn"):
            assert g.any(), p.name


def test_freezing_members_limits_trainable_set():
    members = [tiny_model(), tiny_model(seed=1)]
    ens = FusionEnsemble(members, "rnn", units=4, freeze_members=True)
    assert ens.parameters() == list(ens.head_params.values())


@pytest.mark.parametrize("head", ["rnn", "fc"])
def test_fused_graph_gradients(head):
    rng = np.random.default_rng(5)
    with precision("float64"):
        members = [tiny_model(seq_len=3, units=3), tiny_model("concat-1rnn", seq_len=3, seed=1, units=3)]
        ens = FusionEnsemble(members, head, units=4, seed=2)
        frames, lms = inputs(rng, t=3, n=2)
        labels = rng.uniform(0, 1, size=(6, 2))
        errs = check_gradients(lambda: ccc_loss(labels, ens(frames, lms).reshape(6, 2)), ens.parameters(),
                               h=1e-5, max_entries=8)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


@pytest.mark.parametrize("head", ["none", "rnn"])
def test_manifest_round_trip(tmp_path, rng, head):
    members = [tiny_model(), tiny_model(seed=1)]
    ens = FusionEnsemble(members, head, units=5, seed=3, weights=[[0.5, 0.2], [0.3, 0.4]])
    path = save_manifest(ens, tmp_path / "ens")
    back = load_manifest(path)
    assert back.head == head and back.units == 5
    np.testing.assert_array_equal(back.weights, ens.weights)
    a, b = ens.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    if head != "none":
        frames, lms = inputs(rng)
        np.testing.assert_array_equal(back(frames, lms).data, ens(frames, lms).data)
