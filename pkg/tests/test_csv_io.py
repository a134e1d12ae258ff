import numpy as np

from nudgenet import Dataset, Trajectory
from nudgenet.csv_io import (
    read_dataset,
    read_result,
    read_trajectory,
    write_dataset,
    write_result,
    write_trajectory,
)
from nudgenet.csv_io import write_history
from nudgenet.training import TrainHistory


def test_dataset_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    data = Dataset(inputs=rng.standard_normal((17, 3)) * 13.7,
                   targets=rng.standard_normal((17, 3)) * 13.7,
                   dt_step=0.01)
    path = tmp_path / "dataset.csv"
    write_dataset(path, data)
    header = path.read_text().splitlines()[0]
    assert header == "t,u_1,u_2,u_3,s_1,s_2,s_3"
    loaded = read_dataset(path)
    np.testing.assert_array_equal(loaded.inputs, data.inputs)
    np.testing.assert_array_equal(loaded.targets, data.targets)
    assert loaded.dt_step == data.dt_step


def test_dataset_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    data = Dataset(inputs=rng.standard_normal((5, 2)),
                   targets=rng.standard_normal((5, 2)), dt_step=0.1)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_dataset(a, data)
    write_dataset(b, data)
    assert a.read_bytes() == b.read_bytes()


def test_trajectory_round_trip(tmp_path):
    times = 100.0 + 0.01 * np.arange(25)
    states = np.random.default_rng(2).standard_normal((25, 4)) * 7
    traj = Trajectory(times, states)
    path = tmp_path / "traj.csv"
    write_trajectory(path, traj)
    assert path.read_text().splitlines()[0] == "t,x_1,x_2,x_3,x_4"
    loaded = read_trajectory(path)
    np.testing.assert_array_equal(loaded.times, times)
    np.testing.assert_array_equal(loaded.states, states)


def test_result_round_trip_with_checkpoint_errors(tmp_path):
    times = 0.1 * np.arange(6)
    states = np.random.default_rng(3).standard_normal((6, 2))
    errors = np.array([0.5, 0.25, 0.125])
    path = tmp_path / "run.csv"
    write_result(path, times, states, errors, checkpoint_stride=2)
    t, w, e = read_result(path)
    np.testing.assert_array_equal(t, times)
    np.testing.assert_array_equal(w, states)
    np.testing.assert_array_equal(e[::2], errors)
    assert np.all(np.isnan(e[1::2]))


def test_history_columns(tmp_path):
    hist = TrainHistory(
        train_loss=np.array([3.0, 2.0, 1.5]),
        val_loss=np.array([3.5, 2.5, 2.0]),
        grad_norm=np.array([1.0, 0.5, 0.25]),
        best_index=2,
    )
    path = tmp_path / "history.csv"
    write_history(path, hist)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,train_loss,val_loss,grad_norm"
    assert len(lines) == 4
    assert lines[1].startswith("0,3.0,")
