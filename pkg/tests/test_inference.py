import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manidp import autograd as ag
from manidp import inference as inf
from manidp import network as nw
from manidp import training as tr
from manidp.autograd import ShapeError, Tensor


def rand_spec(num_classes=5):
    return nw.NetworkSpec(
        in_channels=1,
        num_classes=num_classes,
        stem_channels=4,
        gated_channels=(6, 8),
        gated_strides=(1, 1),
        kernel_size=3,
    )


def rand_net(seed=0, **overrides):
    spec_kwargs = dict(
        in_channels=1,
        num_classes=5,
        stem_channels=4,
        gated_channels=(6, 8),
        gated_strides=(1, 1),
        kernel_size=3,
    )
    spec_kwargs.update(overrides)
    return nw.build_network(nw.NetworkSpec(**spec_kwargs), seed=seed)


def rand_images(n=16, seed=0, hw=8):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 1, hw, hw)).astype(np.float32)


@pytest.fixture(scope="session")
def trained_toy():
    """A small digit classifier trained far enough that saliencies carry
    real per-instance signal; shared by the dynamism and histogram tests."""
    from test_training import toy_digits

    x, y = toy_digits(n=512)
    spec = nw.NetworkSpec(
        in_channels=1,
        num_classes=4,
        stem_channels=8,
        gated_channels=(8, 12),
        gated_strides=(2, 1),
        kernel_size=3,
        reduction_ratio=2,
    )
    net = nw.build_network(spec, seed=3, scale_probe=x[:64])
    config = tr.TrainConfig(
        eta=0.5,
        warmup_epochs=6,
        epochs=20,
        learning_rate=0.02,
        lr_warmup_epochs=4,
        momentum=0.9,
        weight_decay=0.0,
        batch_size=32,
        lambda_prime=0.001,
        gamma=0.0,
        seed=3,
    )
    tr.train_model(net, (x, y), config)
    return net, x, y


# -- calibration -------------------------------------------------------------------


def test_calibrate_eta_zero_gives_open_gates():
    net = rand_net(seed=1)
    thr = inf.calibrate_thresholds(net, rand_images(), eta=0.0)
    assert thr.xi == (0.0, 0.0)
    assert thr.eta == 0.0
    assert thr.calibration_size == 16


def test_calibrate_single_instance_matches_batch_rule():
    net = rand_net(seed=2)
    x = rand_images(n=1, seed=5)
    thr = inf.calibrate_thresholds(net, x, eta=0.4)
    with ag.no_grad():
        _, trace = nw.network_forward(net, Tensor(x), tr._inline_threshold_rule(0.4))
    assert list(thr.xi) == pytest.approx(tr.batch_thresholds(trace, 0.4), abs=1e-12)


def test_calibrate_chunked_matches_single_batch_oracle():
    """Chunked 64-bit accumulation against one whole-set pass per layer."""
    net = rand_net(seed=3)
    x = rand_images(n=64, seed=7)
    thr = inf.calibrate_thresholds(net, x, eta=0.3, batch_size=16)

    xi_oracle = []
    for index in range(len(net.layers)):
        rule = [*xi_oracle, *([0.0] * (len(net.layers) - index))]
        with ag.no_grad():
            _, trace = nw.network_forward(net, Tensor(x), rule)
        means = trace.saliencies[index].data.astype(np.float64).mean(axis=0)
        xi_oracle.append(tr.threshold_from_mean(means, 0.3))
    assert list(thr.xi) == pytest.approx(xi_oracle, abs=1e-6)


def test_calibrate_is_insensitive_to_batch_size():
    net = rand_net(seed=4)
    x = rand_images(n=48, seed=9)
    a = inf.calibrate_thresholds(net, x, eta=0.5, batch_size=48)
    b = inf.calibrate_thresholds(net, x, eta=0.5, batch_size=5)
    assert list(a.xi) == pytest.approx(list(b.xi), abs=1e-6)


def test_calibrate_rejects_empty_set():
    net = rand_net(seed=1)
    with pytest.raises(ValueError, match="empty"):
        inf.calibrate_thresholds(net, np.empty((0, 1, 8, 8), dtype=np.float32), eta=0.3)


def test_calibrate_rejects_bad_eta():
    net = rand_net(seed=1)
    with pytest.raises(ValueError, match="eta"):
        inf.calibrate_thresholds(net, rand_images(), eta=1.0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 50))
def test_calibration_monotone_in_eta(seed):
    """Raising the pruning rate never lowers any layer's threshold."""
    net = rand_net(seed=seed)
    x = rand_images(n=24, seed=seed + 100)
    previous = None
    for eta in (0.1, 0.3, 0.5, 0.7):
        xi = inf.calibrate_thresholds(net, x, eta=eta).xi
        if previous is not None:
            for low, high in zip(previous, xi):
                assert high >= low - 1e-12
        previous = xi


def test_thresholds_validate_fields():
    with pytest.raises(ValueError, match="eta"):
        inf.CalibratedThresholds(xi=(0.1,), eta=1.0, calibration_size=4)
    with pytest.raises(ValueError, match="negative"):
        inf.CalibratedThresholds(xi=(-0.1,), eta=0.5, calibration_size=4)
    with pytest.raises(ValueError, match="calibration_size"):
        inf.CalibratedThresholds(xi=(0.1,), eta=0.5, calibration_size=0)


# -- dynamic inference ---------------------------------------------------------------


def open_thresholds(net, n=8):
    return inf.CalibratedThresholds(
        xi=tuple(0.0 for _ in net.layers), eta=0.0, calibration_size=n
    )


def test_open_gates_match_ungated_forward():
    net = rand_net(seed=5)
    x = rand_images(n=8, seed=11)
    predictions, profiles = inf.dynamic_infer(net, x, open_thresholds(net))
    with ag.no_grad():
        logits, _ = nw.network_forward(net, Tensor(x), nw.UNGATED)
    np.testing.assert_array_equal(predictions, logits.data.argmax(axis=1))
    full = nw.full_network_flops(net, (8, 8))
    for profile in profiles:
        assert profile.flops == full
        assert profile.kept_counts() == (6, 8)


def test_skip_logits_match_dense_masked_logits():
    net = rand_net(seed=6)
    x = rand_images(n=12, seed=13)
    thr = inf.calibrate_thresholds(net, x, eta=0.4)
    skip = inf.dynamic_logits(net, x, thr)
    with ag.no_grad():
        dense, _ = nw.network_forward(net, Tensor(x), list(thr.xi))
    scale = np.abs(dense.data).max() + 1e-12
    assert np.abs(skip - dense.data).max() / scale <= 1e-5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 200), eta=st.floats(0.0, 0.8))
def test_skip_dense_equivalence_property(seed, eta):
    net = rand_net(seed=seed)
    x = rand_images(n=6, seed=seed + 1)
    thr = inf.calibrate_thresholds(net, x, eta=eta)
    skip = inf.dynamic_logits(net, x, thr)
    with ag.no_grad():
        dense, _ = nw.network_forward(net, Tensor(x), list(thr.xi))
    scale = np.abs(dense.data).max() + 1e-12
    assert np.abs(skip - dense.data).max() / scale <= 1e-5


def test_profile_flops_consistent_with_layer_flops():
    net = rand_net(seed=7)
    x = rand_images(n=10, seed=17)
    thr = inf.calibrate_thresholds(net, x, eta=0.5)
    _, profiles = inf.dynamic_infer(net, x, thr)
    full = nw.full_network_flops(net, (8, 8))
    for profile in profiles:
        recomputed = nw.network_flops(net, (8, 8), profile.kept_counts())
        assert profile.flops == recomputed
        assert profile.flops <= full
        for kept, layer in zip(profile.kept, net.layers):
            assert len(kept) <= layer.out_channels


def test_profiles_record_correctness_when_labels_given():
    net = rand_net(seed=8)
    x = rand_images(n=6, seed=19)
    labels = np.array([0, 1, 2, 3, 4, 0])
    predictions, profiles = inf.dynamic_infer(net, x, open_thresholds(net), labels)
    for prediction, profile, label in zip(predictions, profiles, labels):
        assert profile.predicted == prediction
        assert profile.correct == (prediction == label)
    _, unlabelled = inf.dynamic_infer(net, x, open_thresholds(net))
    assert all(profile.correct is None for profile in unlabelled)


def test_kept_sets_are_input_dependent_on_trained_model(trained_toy):
    net, x, _ = trained_toy
    thr = inf.calibrate_thresholds(net, x, eta=0.5)
    _, profiles = inf.dynamic_infer(net, x[:100], thr)
    for layer_index in range(len(net.layers)):
        distinct = {profile.kept[layer_index] for profile in profiles}
        if len(distinct) > 1:
            return
    pytest.fail("kept sets identical for all 100 probe instances in every layer")


def test_dynamic_infer_rejects_non_4d_input():
    net = rand_net(seed=9)
    with pytest.raises(ShapeError, match="4-D"):
        inf.dynamic_infer(net, np.zeros((1, 8, 8), dtype=np.float32), open_thresholds(net))


def test_dynamic_infer_rejects_threshold_count_mismatch():
    net = rand_net(seed=9)
    bad = inf.CalibratedThresholds(xi=(0.0,), eta=0.0, calibration_size=1)
    with pytest.raises(ShapeError, match="thresholds"):
        inf.dynamic_infer(net, rand_images(n=2), bad)


# -- evaluation ----------------------------------------------------------------------


def test_evaluate_open_gates_has_zero_reduction():
    net = rand_net(seed=10)
    x = rand_images(n=20, seed=23)
    labels = np.random.default_rng(23).integers(0, 5, size=20)
    metrics = inf.evaluate(net, (x, labels), open_thresholds(net))
    assert metrics["flops_reduction"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["per_layer_kept_fraction"] == pytest.approx([1.0, 1.0])
    with ag.no_grad():
        logits, _ = nw.network_forward(net, Tensor(x), nw.UNGATED)
    ungated_error = float((logits.data.argmax(axis=1) != labels).mean())
    assert metrics["top1_error"] == pytest.approx(ungated_error)


def test_evaluate_chance_level_on_permuted_labels():
    net = rand_net(seed=11, num_classes=10)
    x = rand_images(n=1000, seed=29)
    labels = np.random.default_rng(31).integers(0, 10, size=1000)
    metrics = inf.evaluate(net, (x, labels), open_thresholds(net))
    assert metrics["top1_error"] == pytest.approx(0.9, abs=0.05)


def test_evaluate_mean_flops_matches_profile_mean():
    net = rand_net(seed=12)
    x = rand_images(n=30, seed=37)
    labels = np.random.default_rng(37).integers(0, 5, size=30)
    thr = inf.calibrate_thresholds(net, x, eta=0.5)
    metrics = inf.evaluate(net, (x, labels), thr, batch_size=7)
    _, profiles = inf.dynamic_infer(net, x, thr)
    expected = float(np.mean([profile.flops for profile in profiles]))
    assert abs(metrics["mean_flops"] - expected) <= 1.0


def test_evaluate_requires_labels():
    net = rand_net(seed=13)
    with pytest.raises(ValueError, match="labels"):
        inf.evaluate(net, rand_images(), open_thresholds(net))


# -- FLOPs distribution -----------------------------------------------------------------


def test_distribution_open_gates_single_bin():
    net = rand_net(seed=14)
    x = rand_images(n=25, seed=41)
    labels = np.random.default_rng(41).integers(0, 5, size=25)
    dist = inf.flops_distribution(net, (x, labels), open_thresholds(net), bins=10)
    assert (dist.counts > 0).sum() == 1
    assert dist.counts.sum() == 25


def test_distribution_counts_conserve_mass():
    net = rand_net(seed=15)
    x = rand_images(n=40, seed=43)
    labels = np.random.default_rng(43).integers(0, 5, size=40)
    thr = inf.calibrate_thresholds(net, x, eta=0.5)
    dist = inf.flops_distribution(net, (x, labels), thr, bins=7)
    assert dist.counts.sum() == 40
    assert dist.flops.shape == (40,)
    assert dist.ce.shape == (40,)
    assert np.all(dist.ce >= 0)


def test_distribution_has_spread_on_trained_model(trained_toy):
    net, x, y = trained_toy
    thr = inf.calibrate_thresholds(net, x, eta=0.5)
    dist = inf.flops_distribution(net, (x[:200], y[:200]), thr, bins=12)
    assert (dist.counts > 0).sum() > 1


def test_distribution_rejects_bad_bins():
    net = rand_net(seed=16)
    x = rand_images(n=4, seed=47)
    labels = np.zeros(4, dtype=np.int64)
    with pytest.raises(ValueError, match="bins"):
        inf.flops_distribution(net, (x, labels), open_thresholds(net), bins=0)


def test_save_flops_csv_round_trips(tmp_path):
    net = rand_net(seed=17)
    x = rand_images(n=6, seed=53)
    labels = np.random.default_rng(53).integers(0, 5, size=6)
    thr = inf.calibrate_thresholds(net, x, eta=0.3)
    dist = inf.flops_distribution(net, (x, labels), thr, bins=3)
    path = tmp_path / "flops.csv"
    inf.save_flops_csv(dist, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "flops,cross_entropy,correct"
    assert len(lines) == 7
    first = lines[1].split(",")
    assert int(first[0]) == int(dist.flops[0])
    assert float(first[1]) == pytest.approx(float(dist.ce[0]), abs=1e-6)
