import math

import numpy as np
import pytest

from nudgenet import (
    Lorenz63,
    ObservationOperator,
    ProtocolConfig,
    RmseTable,
    build_system,
    make_reference_runs,
    rmse,
    run_protocol,
)
from nudgenet.evaluation import RmseRow, observation_label
from nudgenet.training import box_init


def rmse_oracle(alg, ref, k0, K):
    """Literal double loop over runs and checkpoints."""
    n_runs = len(alg)
    total = 0.0
    for n in range(n_runs):
        for k in range(k0, K + 1):
            diff = np.asarray(alg[n][k]) - np.asarray(ref[n][k])
            total += float(diff @ diff)
    return math.sqrt(total / ((K - k0) * n_runs))


class TestRmse:
    def test_zero_when_equal(self):
        rng = np.random.default_rng(0)
        runs = rng.standard_normal((4, 11, 3))
        assert rmse(runs, runs.copy(), 2, 10) == 0.0

    def test_constant_offset_closed_form(self):
        rng = np.random.default_rng(1)
        for d, k0, K in [(3, 50, 100), (5, 2, 7), (1, 0, 4)]:
            ref = rng.standard_normal((6, K + 1, d))
            c = 0.37
            alg = ref + c
            expected = c * math.sqrt(d * (K - k0 + 1) / (K - k0))
            assert rmse(alg, ref, k0, K) == pytest.approx(expected, rel=1e-12)

    def test_diverged_run_gives_infinity(self):
        rng = np.random.default_rng(2)
        ref = rng.standard_normal((3, 12, 2))
        alg = ref.copy()
        alg[1, 8, 0] = np.nan
        assert rmse(alg, ref, 4, 11) == math.inf
        alg[1, 8, 0] = np.inf
        assert rmse(alg, ref, 4, 11) == math.inf

    def test_nonfinite_outside_window_is_ignored(self):
        rng = np.random.default_rng(3)
        ref = rng.standard_normal((2, 12, 2))
        alg = ref.copy()
        alg[0, 1, 0] = np.nan  # before k0
        assert rmse(alg, ref, 4, 11) == 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n_runs = int(rng.integers(1, 6))
            n_cp = int(rng.integers(3, 15))
            d = int(rng.integers(1, 5))
            k0 = int(rng.integers(0, n_cp - 2))
            K = int(rng.integers(k0 + 1, n_cp))
            alg = rng.standard_normal((n_runs, n_cp, d)) * 10
            ref = rng.standard_normal((n_runs, n_cp, d)) * 10
            assert rmse(alg, ref, k0, K) == pytest.approx(
                rmse_oracle(alg, ref, k0, K), rel=1e-12
            )

    def test_invariant_under_run_permutation(self):
        rng = np.random.default_rng(5)
        alg = rng.standard_normal((5, 9, 3))
        ref = rng.standard_normal((5, 9, 3))
        perm = rng.permutation(5)
        assert rmse(alg, ref, 1, 8) == pytest.approx(
            rmse(alg[perm], ref[perm], 1, 8), rel=1e-13
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((2, 5, 3)), np.zeros((2, 5, 2)), 1, 4)
        with pytest.raises(ValueError):
            rmse(np.zeros((2, 5, 3)), np.zeros((2, 5, 3)), 4, 4)
        with pytest.raises(ValueError):
            rmse(np.zeros((2, 5, 3)), np.zeros((2, 5, 3)), 1, 5)


class TestRmseTable:
    def test_best_and_inf_rendering(self, tmp_path):
        table = RmseTable()
        table.add(RmseRow("lorenz63", "m", "ninn1", "0", 1.0, 0.2, 4.5))
        table.add(RmseRow("lorenz63", "m", "ninn1", "0", 2.0, 0.2, 3.5))
        table.add(RmseRow("lorenz63", "m", "ninn1", "0", 5.0, 0.2, math.inf))
        assert table.best("ninn1").mu == 2.0
        path = tmp_path / "rmse_table.csv"
        table.write_csv(path)
        text = path.read_text()
        assert "Inf" in text
        assert text.splitlines()[0] == (
            "system,net_label,method,obs_pattern,mu,lambda_decay,rmse"
        )

    def test_best_missing_method_raises(self):
        with pytest.raises(KeyError):
            RmseTable().best("ninn1")


class TestObservationLabel:
    def test_label_is_csv_safe(self):
        op = ObservationOperator((0, 2, 4), 6)
        assert observation_label(op) == "0;2;4"
        assert "," not in observation_label(op)


@pytest.fixture(scope="module")
def tiny_protocol_pieces():
    spec = Lorenz63()
    reference = make_reference_runs(spec, 3, seed=51, start=2.0, window=1.0,
                                    checkpoint_dt=0.1, record_dt=0.01)
    template = build_system(3, width=5, hidden_layers=2, dt_step=0.01)
    rng = np.random.default_rng(8)
    nets = tuple(
        box_init(net, 20.0, rng=rng,
                 input_box=(-20 * np.ones(3), 20 * np.ones(3)))
        for net in template.nets
    )
    system = type(template)(nets, template.stencils, 3, 0.01)
    return spec, reference, system


class TestRunProtocol:
    def test_tiny_protocol_table_shape_and_determinism(self, tiny_protocol_pieces):
        spec, reference, system = tiny_protocol_pieces
        config = ProtocolConfig(
            system="lorenz63", n_runs=3, k0=2, K=9,
            obs_op=ObservationOperator((0,), 3),
            methods=("free-run", "ninn2-lookahead", "nudging"),
            mu_grid=(1.0, 5.0), lambda_grid=(1.0,), substeps=10, seed=13,
            nudging_dt=1e-3,
        )
        table = run_protocol(config, {"tiny": system}, reference, ode_spec=spec)
        methods = [r.method for r in table.rows]
        assert methods.count("free-run") == 1
        assert methods.count("ninn2-lookahead") == 2  # mu grid x lambda grid
        assert methods.count("nudging") == 2
        nudging_rows = [r for r in table.rows if r.method == "nudging"]
        assert all(r.net_label == "ode" for r in nudging_rows)
        assert all(np.isfinite(r.rmse) or math.isinf(r.rmse) for r in table.rows)

        again = run_protocol(config, {"tiny": system}, reference, ode_spec=spec)
        for a, b in zip(table.rows, again.rows):
            assert a == b

    def test_identical_truth_gives_zero_error_rows(self, tiny_protocol_pieces):
        spec, reference, system = tiny_protocol_pieces
        # nudging with huge mu and near-continuous obs tracks the truth; here
        # just check the free-run control row is finite and nonzero
        config = ProtocolConfig(
            system="lorenz63", n_runs=2, k0=0, K=5,
            obs_op=ObservationOperator((0,), 3),
            methods=("free-run",), seed=4,
        )
        table = run_protocol(config, {"tiny": system}, reference)
        assert len(table.rows) == 1
        assert table.rows[0].rmse > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProtocolConfig(system="lorenz63", k0=5, K=5)
        with pytest.raises(ValueError):
            ProtocolConfig(system="lorenz63", n_runs=0)
        config = ProtocolConfig(system="lorenz63", obs_op=None)
        with pytest.raises(ValueError):
            run_protocol(config, {}, [])
