import numpy as np
import pytest

from batchlens.optim import LrSchedule, Rmsprop, Sgd


def params_of(*vals):
    return {f"p{i}": np.array([v], dtype=np.float32) for i, v in enumerate(vals)}


class TestSgd:
    def test_zero_lr_is_identity(self):
        params = params_of(1.0, -2.0)
        grads = {"p0": np.array([5.0]), "p1": np.array([3.0])}
        Sgd(lr=0.0).step(params, grads)
        assert params["p0"][0] == 1.0 and params["p1"][0] == -2.0

    def test_plain_step_arithmetic(self):
        params = params_of(1.0)
        Sgd(lr=0.1).step(params, {"p0": np.array([0.5], dtype=np.float32)})
        assert np.isclose(params["p0"][0], 0.95)

    def test_weight_decay_only_on_decay_names(self):
        params = params_of(1.0, 1.0)
        grads = {"p0": np.zeros(1, np.float32), "p1": np.zeros(1, np.float32)}
        Sgd(lr=0.1, weight_decay=0.1, decay_names={"p0"}).step(params, grads)
        assert np.isclose(params["p0"][0], 0.99)
        assert params["p1"][0] == 1.0

    def test_momentum_accumulates(self):
        params = params_of(0.0)
        opt = Sgd(lr=1.0, momentum=0.5)
        g = {"p0": np.array([1.0], dtype=np.float32)}
        opt.step(params, g)   # v=1, p=-1
        opt.step(params, g)   # v=1.5, p=-2.5
        assert np.isclose(params["p0"][0], -2.5)

    def test_missing_key_raises(self):
        with pytest.raises(KeyError):
            Sgd(lr=0.1).step(params_of(1.0), {})

    def test_non_finite_grad_raises(self):
        with pytest.raises(ValueError, match="non-finite"):
            Sgd(lr=0.1).step(params_of(1.0), {"p0": np.array([np.nan])})

    def test_zero_grads_zero_decay_is_exact_fixed_point(self):
        params = params_of(1.25, -0.5)
        before = {k: v.copy() for k, v in params.items()}
        opt = Sgd(lr=0.1, momentum=0.9)
        for _ in range(10):
            opt.step(params, {k: np.zeros(1, np.float32) for k in params})
        for k in params:
            assert np.array_equal(params[k], before[k])


class TestRmsprop:
    def test_constant_gradient_reaches_unit_scale_update(self):
        # fixed point: s -> g^2, so each update approaches -lr * sign(g)
        params = params_of(0.0)
        opt = Rmsprop(lr=1e-3, decay=0.999)
        g = {"p0": np.array([0.37], dtype=np.float32)}
        for _ in range(10_000):
            opt.step(params, g)
        last = params["p0"][0]
        opt.step(params, g)
        update = params["p0"][0] - last
        assert abs(-update - 1e-3) < 1e-5  # within 1% of lr

    def test_zero_gradient_is_identity(self):
        params = params_of(2.0)
        opt = Rmsprop(lr=0.01)
        for _ in range(5):
            opt.step(params, {"p0": np.zeros(1, np.float32)})
        assert params["p0"][0] == 2.0

    def test_steady_state_updates_are_scale_invariant(self):
        params = params_of(0.0, 0.0)
        opt = Rmsprop(lr=1e-3, decay=0.999)
        grads = {"p0": np.array([0.2], dtype=np.float32),
                 "p1": np.array([2.0], dtype=np.float32)}
        for _ in range(10_000):
            opt.step(params, grads)
        before = {k: v.copy() for k, v in params.items()}
        opt.step(params, grads)
        d0 = abs(params["p0"][0] - before["p0"][0])
        d1 = abs(params["p1"][0] - before["p1"][0])
        assert abs(d0 - d1) / d1 < 0.02

    def test_decay_range_validated(self):
        with pytest.raises(ValueError):
            Rmsprop(lr=0.1, decay=1.0)


def test_update_order_is_irrelevant():
    grads = {f"p{i}": np.array([0.1 * (i + 1)], dtype=np.float32) for i in range(4)}
    forward = params_of(1.0, 2.0, 3.0, 4.0)
    backward_order = dict(reversed(list(params_of(1.0, 2.0, 3.0, 4.0).items())))
    a = Sgd(lr=0.1, momentum=0.9, weight_decay=0.01, decay_names={"p1", "p3"})
    b = Sgd(lr=0.1, momentum=0.9, weight_decay=0.01, decay_names={"p1", "p3"})
    for _ in range(3):
        a.step(forward, grads)
        b.step(backward_order, grads)
    for k in forward:
        assert np.array_equal(forward[k], backward_order[k])


class TestLrSchedule:
    def test_lookup_before_boundary(self):
        sched = LrSchedule([(0, 0.1), (80, 0.01)])
        assert sched.lr_at(5) == 0.1

    def test_boundary_inclusive(self):
        sched = LrSchedule([(0, 0.1), (80, 0.01)])
        assert sched.lr_at(80) == 0.01

    def test_beyond_last_boundary(self):
        sched = LrSchedule([(0, 0.1), (80, 0.01)])
        assert sched.lr_at(500) == 0.01

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            LrSchedule([])

    def test_non_increasing_rejected(self):
        with pytest.raises(ValueError):
            LrSchedule([(0, 0.1), (0, 0.01)])

    def test_parse_round_trip(self):
        sched = LrSchedule.parse("0:0.1,15:0.01,30:0.001")
        assert sched.lr_at(14) == 0.1
        assert sched.lr_at(15) == 0.01
        assert str(sched) == "0:0.1,15:0.01,30:0.001"


def test_short_training_run_decreases_loss():
    from batchlens.experiments import ExperimentConfig, load_datasets, train

    cfg = ExperimentConfig(model="toy-6", classes=4, synth_train=6, synth_test=2,
                           synth_noise=0.5, synth_size=8, synth_channels=2,
                           epochs=6, eval_protocols="", lr_schedule="0:0.05",
                           seed=0)
    tr, te = load_datasets(cfg)
    result = train(cfg, tr, te)
    losses = [r.loss for r in result.rows if r.protocol == "train"]
    assert losses[-1] < losses[0]
    assert not result.diverged
