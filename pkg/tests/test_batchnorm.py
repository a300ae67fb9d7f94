import numpy as np
import pytest

from batchlens.batchnorm import BatchNorm, BnMode, batch_stats
from batchlens.data import BALANCED, BatchPlan, make_synthetic
from batchlens.experiments import apply_population, freeze_population
from batchlens.gradcheck import LAYER_TOL, check_batchnorm
from batchlens.models import build, get_model_spec
from batchlens.tensor import Rng, channel_moments


def test_forward_hand_case():
    # independent scalar evaluation: mu=2.5, var=1.25,
    # xhat = (x-2.5)/sqrt(1.25+1e-5)
    bn = BatchNorm(1, dtype=np.float64)
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1)
    y, _ = bn.forward(x, BnMode.TRAIN)
    expect = [-1.34164, -0.44721, 0.44721, 1.34164]
    assert np.allclose(y.ravel(), expect, atol=1e-4)


def test_constant_channel_maps_to_zero():
    bn = BatchNorm(2)
    x = np.full((3, 2, 2, 2), 5.0, dtype=np.float32)
    y, _ = bn.forward(x, BnMode.TRAIN)
    assert np.allclose(y, 0.0)


def test_population_mode_with_identity_stats():
    bn = BatchNorm(2, dtype=np.float64)
    x = Rng(0).gaussian((2, 2, 3, 3))
    y, _ = bn.forward(x, BnMode.EVAL_POPULATION)
    assert np.allclose(y, x / np.sqrt(1.0 + bn.eps))


def test_train_mode_updates_running_stats_eval_batch_does_not():
    rng = Rng(1)
    x = rng.gaussian((4, 3, 2, 2)).astype(np.float32)
    bn = BatchNorm(3)
    bn.forward(x, BnMode.EVAL_BATCH_STATS)
    assert np.allclose(bn.running_mean, 0.0) and np.allclose(bn.running_var, 1.0)
    assert bn.num_batches_tracked == 0
    bn.forward(x, BnMode.TRAIN)
    assert not np.allclose(bn.running_mean, 0.0)
    assert bn.num_batches_tracked == 1


def test_too_few_positions_rejected():
    bn = BatchNorm(1)
    with pytest.raises(ValueError):
        bn.forward(np.ones((1, 1, 1, 1), dtype=np.float32), BnMode.TRAIN)


def test_backward_zero_grad_gives_zero():
    bn = BatchNorm(2, dtype=np.float64)
    x = Rng(2).gaussian((2, 2, 2, 2))
    _, cache = bn.forward(x, BnMode.TRAIN)
    gin, grads = bn.backward(cache, np.zeros_like(x))
    assert not np.any(gin) and not np.any(grads["gamma"]) and not np.any(grads["beta"])


def test_backward_rejects_population_cache():
    bn = BatchNorm(2, dtype=np.float64)
    x = Rng(3).gaussian((2, 2, 2, 2))
    _, cache = bn.forward(x, BnMode.EVAL_POPULATION)
    with pytest.raises(ValueError):
        bn.backward(cache, x)


def test_all_position_finite_difference():
    # the single most important check in the repository: the numeric
    # gradient probes every input position, so the batch coupling through
    # the shared mean/variance must be exact
    for i in range(5):
        assert check_batchnorm(Rng(106).split(i)) < LAYER_TOL


def test_grad_input_sums_to_zero_per_channel():
    rng = Rng(4)
    bn = BatchNorm(3, dtype=np.float64)
    x = rng.gaussian((3, 3, 2, 2)) * 2 + 1
    _, cache = bn.forward(x, BnMode.TRAIN)
    gin, _ = bn.backward(cache, rng.gaussian(x.shape))
    sums = gin.sum(axis=(0, 2, 3))
    assert np.max(np.abs(sums)) < 1e-10


def test_normalization_invariant_on_random_inputs():
    rng = Rng(5)
    for trial in range(100):
        m = int(rng.integers(2, 6))
        n = int(rng.integers(1, 4))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        if m * h * w < 8:
            h = w = 3
        x = (rng.gaussian((m, n, h, w)) * 1.7 + rng.gaussian((1, n, 1, 1))
             ).astype(np.float32)
        bn = BatchNorm(n)
        mode = BnMode.TRAIN if trial % 2 == 0 else BnMode.EVAL_BATCH_STATS
        y, _ = bn.forward(x, mode)
        y64 = y.astype(np.float64)
        mean = y64.mean(axis=(0, 2, 3))
        var = y64.var(axis=(0, 2, 3))
        assert np.max(np.abs(mean)) <= 1e-4
        assert np.all(var >= 1 - 1e-3) and np.all(var <= 1 + 1e-3)


def test_one_pass_and_two_pass_variance_agree():
    rng = Rng(6)
    for _ in range(20):
        x = (rng.gaussian((4, 3, 3, 3)) * rng.uniform(low=0.5, high=2.0)
             + rng.gaussian((1, 3, 1, 1))).astype(np.float32)
        mean, second = channel_moments(x)
        one_pass = np.maximum(second.astype(np.float64)
                              - mean.astype(np.float64) ** 2, 0.0)
        _, two_pass = batch_stats(x)
        denom = np.maximum(np.abs(two_pass), 1e-8)
        assert np.max(np.abs(one_pass - two_pass) / denom) <= 1e-4


def test_batch_coupling_witness():
    """EvalBatchStats couples images; EvalPopulation provably cannot."""
    rng = Rng(7)
    bn = BatchNorm(2)
    base = rng.gaussian((4, 2, 3, 3)).astype(np.float32)
    outlier = base.copy()
    outlier[3] += 25.0  # replace image 3 with an outlier
    y_base, _ = bn.forward(base, BnMode.EVAL_BATCH_STATS)
    y_out, _ = bn.forward(outlier, BnMode.EVAL_BATCH_STATS)
    delta = np.max(np.abs(y_base[0] - y_out[0]))  # image 0 was untouched
    assert delta > 1e-3
    p_base, _ = bn.forward(base, BnMode.EVAL_POPULATION)
    p_out, _ = bn.forward(outlier, BnMode.EVAL_POPULATION)
    assert np.array_equal(p_base[0], p_out[0])


def test_ema_converges_geometrically_to_repeated_batch_stats():
    rng = Rng(8)
    x = (rng.gaussian((4, 2, 3, 3)) * 1.5 + 2.0).astype(np.float32)
    mu, var = batch_stats(x)
    bn = BatchNorm(2)
    gap0_mean = np.abs(bn.running_mean - mu)
    gap0_var = np.abs(bn.running_var - var)
    k = 25
    for _ in range(k):
        bn.forward(x, BnMode.TRAIN)
    decay = bn.momentum ** k
    assert np.allclose(np.abs(bn.running_mean - mu), decay * gap0_mean, rtol=1e-3)
    assert np.allclose(np.abs(bn.running_var - var), decay * gap0_var, rtol=1e-3)


def _tiny_net_and_data(seed=0):
    ds = make_synthetic(3, 4, (2, 6, 6), Rng(seed).split(1), noise=0.5)
    spec = get_model_spec("toy-6", classes=3, in_channels=2)
    net = build(spec, Rng(seed).split(2))
    return net, ds


def test_fullpass_on_single_batch_equals_that_batch():
    net, ds = _tiny_net_and_data()
    plan = BatchPlan(BALANCED)
    sub = make_synthetic(3, 1, (2, 6, 6), Rng(1).split(1), noise=0.3)
    stats = freeze_population(net, sub, "fullpass", plan, Rng(0))
    from batchlens.batchnorm import BnMode as _M
    from batchlens.data import Sampler, center_crop
    images, _, _ = Sampler(sub, plan, Rng(0)).next_batch()
    _, caches = net.forward(center_crop(images, sub.crop), _M.EVAL_BATCH_STATS)
    direct = net.bn_batch_stats(caches)
    for name, (mean, var) in stats.items():
        assert np.allclose(mean, direct[name][0], atol=1e-6)
        assert np.allclose(var, direct[name][1], atol=1e-6)


def test_fullpass_is_deterministic():
    net, ds = _tiny_net_and_data()
    plan = BatchPlan(BALANCED)
    a = freeze_population(net, ds, "fullpass", plan, Rng(3))
    b = freeze_population(net, ds, "fullpass", plan, Rng(3))
    for name in a:
        assert np.array_equal(a[name][0], b[name][0])
        assert np.array_equal(a[name][1], b[name][1])


def test_ema_strategy_returns_current_running_stats():
    net, ds = _tiny_net_and_data()
    stats = freeze_population(net, ds, "ema", BatchPlan(BALANCED))
    for name, bn in net.norm_layers():
        assert np.array_equal(stats[name][0], bn.running_mean)
        assert np.array_equal(stats[name][1], bn.running_var)
    apply_population(net, stats)


def test_empty_dataset_rejected():
    net, ds = _tiny_net_and_data()
    class Empty:
        def __len__(self):
            return 0
    with pytest.raises(ValueError):
        freeze_population(net, Empty(), "fullpass", BatchPlan(BALANCED))
