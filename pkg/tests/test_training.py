import numpy as np
import pytest

from nudgenet import (
    Dataset,
    Lorenz63,
    TrainConfig,
    bias_order_penalty,
    box_init,
    build_system,
    data_loss,
    forward,
    make_training_set,
    max_bias_violation,
    pack_params,
    regularizer,
    system_forward,
    train_system,
    unpack_params,
)
from nudgenet.resnet import ActivationSpec, LayerParams, ResNetParams, pack_grads
from nudgenet.training import _Objective, split_indices


def scalar_net(w=2.0, tau=0.5, eps=0.2, bias=(0.0,)):
    return ResNetParams(
        input_dim=1, output_dim=1, depth=3, hidden_width=1, tau=tau,
        opening=LayerParams([[1.0]], [0.0]),
        hidden=(LayerParams([[0.0]], list(bias)),),
        closing=[[w]],
        activation=ActivationSpec(eps),
    )


class TestDataLoss:
    def test_zero_when_predictions_equal_targets(self):
        net = scalar_net()
        inputs = np.array([[0.5], [1.5]])
        targets, _ = forward(net, inputs)
        assert data_loss(net, inputs, targets) == 0.0

    def test_single_sample_arithmetic(self):
        # output 3 against target 1 gives (1/2) * 2^2 = 2
        net = scalar_net(w=1.0, tau=0.0)
        x = np.array([[3.0]])  # linear branch passes 3 straight through
        pred, _ = forward(net, x)
        assert pred[0, 0] == pytest.approx(3.0)
        assert data_loss(net, x, np.array([[1.0]])) == pytest.approx(2.0)

    def test_duplicating_samples_keeps_value(self):
        rng = np.random.default_rng(0)
        net = scalar_net(w=1.3)
        inputs = rng.standard_normal((4, 1))
        targets = rng.standard_normal((4, 1))
        once = data_loss(net, inputs, targets)
        twice = data_loss(net, np.vstack([inputs, inputs]),
                          np.vstack([targets, targets]))
        assert twice == pytest.approx(once, rel=1e-15)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            data_loss(scalar_net(), np.zeros((0, 1)), np.zeros((0, 1)))


class TestRegularizer:
    def test_zero_weight(self):
        assert regularizer(scalar_net(), 0.0) == 0.0

    def test_single_weight_formula(self):
        # lone parameter w=2 with lam=2: (2/2) * (|2| + 2^2) = 6
        net = ResNetParams(
            input_dim=1, output_dim=1, depth=3, hidden_width=1, tau=0.5,
            opening=LayerParams([[0.0]], [0.0]),
            hidden=(LayerParams([[0.0]], [0.0]),),
            closing=[[2.0]],
            activation=ActivationSpec(0.1),
        )
        assert regularizer(net, 2.0, l1_delta=1e-12) == pytest.approx(6.0,
                                                                      abs=1e-9)

    def test_invariant_under_entry_permutation(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((4, 4))
        b = rng.standard_normal(4)

        def build(weights):
            return ResNetParams(
                input_dim=4, output_dim=1, depth=3, hidden_width=4, tau=0.5,
                opening=LayerParams(weights, b),
                hidden=(LayerParams(np.zeros((4, 4)), np.zeros(4)),),
                closing=np.zeros((1, 4)),
                activation=ActivationSpec(0.1),
            )

        shuffled = w.ravel().copy()
        rng.shuffle(shuffled)
        a = regularizer(build(w), 0.7)
        bville = regularizer(build(shuffled.reshape(4, 4)), 0.7)
        assert a == pytest.approx(bville, rel=1e-12)


class TestBiasOrderPenalty:
    def test_sorted_biases_cost_nothing(self):
        net = scalar_net()
        assert bias_order_penalty(net, 10.0) == 0.0

    def test_single_drop_formula(self):
        # bias pair (1, 0) with gamma=2: (2/2) * min(-1, 0)^2 = 1
        net = ResNetParams(
            input_dim=1, output_dim=1, depth=3, hidden_width=2, tau=0.5,
            opening=LayerParams(np.zeros((2, 1)), [1.0, 0.0]),
            hidden=(LayerParams(np.zeros((2, 2)), [0.0, 0.0]),),
            closing=np.zeros((1, 2)),
            activation=ActivationSpec(0.1),
        )
        assert bias_order_penalty(net, 2.0) == pytest.approx(1.0)

    def test_invariant_to_constant_shift(self):
        rng = np.random.default_rng(2)
        b = rng.standard_normal(5)

        def build(bias):
            return ResNetParams(
                input_dim=1, output_dim=1, depth=3, hidden_width=5, tau=0.5,
                opening=LayerParams(np.zeros((5, 1)), bias),
                hidden=(LayerParams(np.zeros((5, 5)), np.sort(b)),),
                closing=np.zeros((1, 5)),
                activation=ActivationSpec(0.1),
            )

        assert bias_order_penalty(build(b), 3.0) == pytest.approx(
            bias_order_penalty(build(b + 7.5), 3.0), rel=1e-12
        )

    def test_nonnegative_and_zero_iff_ordered(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            b = rng.standard_normal(4)
            net = ResNetParams(
                input_dim=1, output_dim=1, depth=3, hidden_width=4, tau=0.5,
                opening=LayerParams(np.zeros((4, 1)), b),
                hidden=(LayerParams(np.zeros((4, 4)), np.zeros(4)),),
                closing=np.zeros((1, 4)),
                activation=ActivationSpec(0.1),
            )
            pen = bias_order_penalty(net, 1.0)
            assert pen >= 0.0
            assert (pen == 0.0) == bool(np.all(np.diff(b) >= 0))


class TestBoxInit:
    def template(self, d=3, width=6, depth=5):
        return build_system(d, width=width, hidden_layers=depth - 2).nets[0]

    def test_same_seed_identical(self):
        t = self.template()
        a = box_init(t, 1.0, rng=5)
        b = box_init(t, 1.0, rng=5)
        np.testing.assert_array_equal(pack_params(a), pack_params(b))

    def test_biases_sorted_so_penalty_is_zero(self):
        t = self.template()
        net = box_init(t, 2.0, rng=6)
        assert bias_order_penalty(net, 1.0) == 0.0

    def test_forward_finite_on_box_inputs(self):
        t = self.template()
        lo, hi = -20.0 * np.ones(3), 20.0 * np.ones(3)
        net = box_init(t, 10.0, rng=7, input_box=(lo, hi))
        rng = np.random.default_rng(8)
        samples = rng.uniform(lo, hi, (50, 3))
        out, _ = forward(net, samples)
        assert np.all(np.isfinite(out))

    def test_opening_preactivations_respect_scale(self):
        t = self.template()
        lo, hi = -15.0 * np.ones(3), 15.0 * np.ones(3)
        scale = 4.0
        net = box_init(t, scale, rng=9, input_box=(lo, hi))
        rng = np.random.default_rng(10)
        samples = rng.uniform(lo, hi, (200, 3))
        z = samples @ net.opening.weights.T + net.opening.bias
        assert np.max(np.abs(z)) <= 1.5 * scale + 1e-9


class TestObjectiveGradient:
    def test_matches_central_difference_with_penalties(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(10):
            template = build_system(
                2, width=int(rng.integers(2, 6)),
                hidden_layers=int(rng.integers(1, 4)),
            ).nets[0]
            net = box_init(template, 1.0, rng=rng,
                           input_box=(-np.ones(2), np.ones(2)))
            inputs = rng.standard_normal((8, 2))
            targets = rng.standard_normal((8, 1))
            cfg = TrainConfig(lam=0.3, gamma=2.7, l1_delta=1e-8)
            obj = _Objective(net, inputs, targets, cfg)
            theta = pack_params(net) + 0.05 * rng.standard_normal(
                pack_params(net).size
            )
            g = obj.gradient(theta)
            v = rng.standard_normal(theta.size)
            v /= np.linalg.norm(v)
            h = 1e-6 * max(1.0, np.linalg.norm(theta))
            fd = (obj.value(theta + h * v) - obj.value(theta - h * v)) / (2 * h)
            an = float(g @ v)
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
        assert worst < 1e-5


class TestSplit:
    def test_deterministic_and_disjoint(self):
        a_train, a_val = split_indices(100, 0.8, seed=3)
        b_train, b_val = split_indices(100, 0.8, seed=3)
        np.testing.assert_array_equal(a_train, b_train)
        np.testing.assert_array_equal(a_val, b_val)
        assert len(a_train) == 80 and len(a_val) == 20
        assert not set(a_train) & set(a_val)

    def test_tiny_dataset_keeps_one_of_each(self):
        train, val = split_indices(2, 0.8, seed=0)
        assert len(train) == 1 and len(val) == 1


@pytest.fixture(scope="module")
def tiny_training_run():
    """Small but real training used by several behavioral tests."""
    spec = Lorenz63()
    data = make_training_set(spec, 400, 1e-2, burn_in=5.0, rng=21)
    system = build_system(3, width=8, hidden_layers=2, dt_step=1e-2)
    cfg = TrainConfig(lam=1e-6, gamma=1e4, patience=60, max_iters=150,
                      seed=77, box_scale=25.0)
    trained, histories = train_system(system, data, cfg)
    return spec, data, system, cfg, trained, histories


class TestTrainSystem:
    def test_training_reduces_loss_and_orders_biases(self, tiny_training_run):
        _, data, _, cfg, trained, histories = tiny_training_run
        for hist in histories:
            assert hist.train_loss[hist.best_index] <= hist.train_loss[0]
            best_val = hist.val_loss[hist.best_index]
            assert np.all(hist.val_loss[hist.best_index:] >= best_val - 1e-15)
        for net in trained.nets:
            assert max_bias_violation(net) < 1e-3

    def test_patience_stops_after_no_improvement(self, tiny_training_run):
        *_, histories = tiny_training_run
        for hist in histories:
            n_iters = len(hist.val_loss) - 1
            if n_iters < 150:  # stopped early: exactly patience past the best
                assert n_iters - hist.best_index == 60

    def test_one_step_prediction_beats_persistence(self, tiny_training_run):
        _, data, _, cfg, trained, _ = tiny_training_run
        _, val_idx = split_indices(len(data), cfg.split_fraction, cfg.seed)
        preds = system_forward(trained, data.inputs[val_idx])
        model_err = np.sqrt(
            np.mean(np.sum((preds - data.targets[val_idx]) ** 2, axis=1))
        )
        persistence = np.sqrt(
            np.mean(
                np.sum((data.inputs[val_idx] - data.targets[val_idx]) ** 2,
                       axis=1)
            )
        )
        assert model_err < 0.5 * persistence

    def test_bit_identical_given_same_seed(self, tiny_training_run):
        spec, data, system, cfg, trained, _ = tiny_training_run
        again, _ = train_system(system, data, cfg)
        for a, b in zip(trained.nets, again.nets):
            np.testing.assert_array_equal(pack_params(a), pack_params(b))

    def test_dimension_mismatch_rejected(self, tiny_training_run):
        spec, data, system, cfg, *_ = tiny_training_run
        bad = Dataset(inputs=data.inputs[:, :2], targets=data.targets[:, :2],
                      dt_step=data.dt_step)
        with pytest.raises(ValueError):
            train_system(build_system(3, width=4, hidden_layers=1), bad, cfg)

    def test_parallel_jobs_do_not_change_results(self, tiny_training_run):
        spec, data, system, cfg, trained, _ = tiny_training_run
        parallel, _ = train_system(system, data, cfg, jobs=2)
        for a, b in zip(trained.nets, parallel.nets):
            np.testing.assert_array_equal(pack_params(a), pack_params(b))


class TestTrainConfigValidation:
    def test_split_fraction_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(split_fraction=1.0)

    def test_patience_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(gamma=-1.0)
