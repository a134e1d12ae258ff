"""End-to-end pipeline driver.

Four commands cover the experiment cycle, each reading one INI-style
config file and writing its artifacts plus a JSON run manifest:

    gen-data    dataset, reference trajectories, observation checkpoints
    train       trained model file and per-net history CSVs
    assimilate  per-method / per-grid-cell assimilation results
    report      the aggregated rmse_table.csv

Exit codes: 0 ok, 2 config problem, 3 data/model problem, 4 schedule
incompatibility, 1 internal error.  All randomness flows from the single
master seed in the config (or --seed), so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import configparser
import datetime
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assimilation import (
    NudgeSchedule,
    ObservationOperator,
    ObservationStream,
    ScheduleError,
    run_assimilation,
)
from .csv_io import (
    read_dataset,
    read_result,
    read_trajectory,
    write_dataset,
    write_history,
    write_result,
    write_trajectory,
)
from .dynamics import Lorenz63, Lorenz96, make_reference_runs, make_training_set
from .evaluation import RmseRow, RmseTable, observation_label
from .model_io import ModelIOError, load_model, save_model
from .resnet import build_system, cyclic_stencils
from .training import TrainConfig, train_system

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SCHEDULE = 4


class ConfigError(ValueError):
    """Bad or missing configuration; the message names the field."""


class PipelineDataError(ValueError):
    """Input files and model shapes do not fit together."""


class IncompleteResultsError(ValueError):
    """A result directory is missing runs."""


# ---------------------------------------------------------------------------
# configuration


class Config:
    """Typed access to one INI experiment file."""

    def __init__(self, path):
        self.path = Path(path)
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(self.path) as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config {path}: {err}") from None
        self.parser = parser

    def _get(self, section, key, cast, default=...):
        if not self.parser.has_option(section, key):
            if default is ...:
                raise ConfigError(f"missing required field [{section}] {key}")
            return default
        raw = self.parser.get(section, key)
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: cannot interpret {raw!r}"
            ) from None

    def get_str(self, section, key, default=...):
        return self._get(section, key, str, default)

    def get_int(self, section, key, default=...):
        return self._get(section, key, int, default)

    def get_float(self, section, key, default=...):
        return self._get(section, key, float, default)

    def get_bool(self, section, key, default=...):
        def cast(raw):
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)

        return self._get(section, key, cast, default)

    def get_floats(self, section, key, default=...):
        def cast(raw):
            return tuple(float(v) for v in raw.replace(",", " ").split())

        return self._get(section, key, cast, default)

    def get_ints(self, section, key, default=...):
        def cast(raw):
            return tuple(int(v) for v in raw.replace(",", " ").split())

        return self._get(section, key, cast, default)

    def get_strs(self, section, key, default=...):
        def cast(raw):
            return tuple(v.strip() for v in raw.split(",") if v.strip())

        return self._get(section, key, cast, default)


def ode_spec_from(cfg: Config):
    name = cfg.get_str("experiment", "system").strip().lower()
    if name == "lorenz63":
        return Lorenz63(
            sigma=cfg.get_float("system", "sigma", 10.0),
            rho=cfg.get_float("system", "rho", 28.0),
            beta=cfg.get_float("system", "beta", 8.0 / 3.0),
        )
    if name == "lorenz96":
        return Lorenz96(
            forcing=cfg.get_float("system", "forcing", 10.0),
            dim=cfg.get_int("system", "dim", 40),
        )
    raise ConfigError(
        f"[experiment] system: unknown system {name!r} (lorenz63 or lorenz96)"
    )


def seed_from(cfg: Config, override):
    return override if override is not None else cfg.get_int("experiment", "seed")


# ---------------------------------------------------------------------------
# manifests


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command, cfg: Config, seed, parameters,
                   inputs=(), outputs=()):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config_sha256": _sha256(cfg.path),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "parameters": parameters,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {
            str(Path(p).relative_to(out_dir)): _sha256(Path(p)) for p in outputs
        },
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: Config, out_dir: Path, seed: int, jobs: int) -> int:
    spec = ode_spec_from(cfg)
    n_samples = cfg.get_int("data", "n_samples", 15000)
    dt_step = cfg.get_float("data", "dt_step", 1e-2)
    burn_in = cfg.get_float("data", "burn_in", 20.0)
    n_runs = cfg.get_int("data", "n_reference_runs", 100)
    start = cfg.get_float("data", "assimilation_start", 100.0)
    truth_dt = cfg.get_float("data", "truth_dt", 1e-3)
    checkpoint_dt = cfg.get_float("data", "checkpoint_dt", 0.1)
    k_end = cfg.get_int("protocol", "K", 100 if isinstance(spec, Lorenz63) else 200)
    window = k_end * checkpoint_dt

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    dataset = make_training_set(
        spec, n_samples, dt_step, burn_in, rng=[seed, 0xDA7A]
    )
    dataset_path = out_dir / "dataset.csv"
    write_dataset(dataset_path, dataset)
    outputs.append(dataset_path)

    runs = make_reference_runs(
        spec, n_runs, seed, start=start, window=window,
        checkpoint_dt=checkpoint_dt, record_dt=dt_step, dt=truth_dt,
    )
    for i, run in enumerate(runs):
        ref_path = out_dir / f"ref_{i:03d}.csv"
        obs_path = out_dir / f"obs_{i:03d}.csv"
        write_trajectory(ref_path, run.trajectory)
        write_trajectory(obs_path, run.checkpoints)
        outputs.extend([ref_path, obs_path])

    write_manifest(
        out_dir, "gen-data", cfg, seed,
        {
            "system": cfg.get_str("experiment", "system"),
            "n_samples": n_samples,
            "dt_step": dt_step,
            "n_reference_runs": n_runs,
            "assimilation_start": start,
            "window": window,
        },
        outputs=outputs,
    )
    return EXIT_OK


def _system_template(cfg: Config, spec, dt_step):
    width = cfg.get_int("model", "width", 15)
    hidden_layers = cfg.get_int("model", "hidden_layers", 5)
    epsilon = cfg.get_float("model", "epsilon", 0.1)
    tau = cfg.get_float("model", "tau", 1.0 / hidden_layers)
    reduced = cfg.get_bool("model", "reduced_stencil", False)
    stencils = cyclic_stencils(spec.dim) if reduced else None
    return build_system(
        spec.dim, width, hidden_layers, dt_step=dt_step, stencils=stencils,
        tau=tau, epsilon=epsilon,
    )


def cmd_train(cfg: Config, data_dir: Path, out_dir: Path, seed: int,
              jobs: int) -> int:
    spec = ode_spec_from(cfg)
    dataset_path = data_dir / "dataset.csv"
    if not dataset_path.exists():
        raise PipelineDataError(f"dataset file {dataset_path} does not exist")
    dataset = read_dataset(dataset_path)
    if dataset.inputs.shape[1] != spec.dim:
        raise PipelineDataError(
            f"dataset has {dataset.inputs.shape[1]} components, the configured "
            f"system has {spec.dim}"
        )

    template = _system_template(cfg, spec, dataset.dt_step)
    train_cfg = TrainConfig(
        lam=cfg.get_float("train", "lambda", 1e-6),
        gamma=cfg.get_float("train", "gamma", 1e4),
        split_fraction=cfg.get_float("train", "split_fraction", 0.8),
        patience=cfg.get_int("train", "patience", 400),
        max_iters=cfg.get_int("train", "max_iters", 2000),
        l1_delta=cfg.get_float("train", "l1_delta", 1e-8),
        seed=seed,
        box_scale=cfg.get_float("train", "box_scale", 1.0),
        tol=cfg.get_float("train", "tol", 1e-8),
    )
    trained, histories = train_system(template, dataset, train_cfg, jobs=jobs)

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    model_path = out_dir / "model.bin"
    save_model(trained, model_path)
    outputs.append(model_path)
    for i, hist in enumerate(histories):
        hist_path = out_dir / f"history_net{i:03d}.csv"
        write_history(hist_path, hist)
        outputs.append(hist_path)

    write_manifest(
        out_dir, "train", cfg, seed,
        {
            "width": template.nets[0].hidden_width,
            "hidden_layers": template.depth - 2,
            "dt_step": dataset.dt_step,
            "net_label": cfg.get_str("model", "label", "model"),
        },
        inputs=[dataset_path],
        outputs=outputs,
    )
    return EXIT_OK


def _cell_dirname(method, mu, lam):
    if method in ("free-run", "direct-obs"):
        return method
    return f"{method}_mu{mu:g}_lam{lam:g}"


def _grid_cells(cfg: Config, method):
    if method.startswith("ninn"):
        return [
            (mu, lam)
            for mu in cfg.get_floats("assimilate", "mu_grid",
                                     (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0))
            for lam in cfg.get_floats("assimilate", "lambda_grid", (0.2, 1.0, 3.0))
        ]
    if method == "nudging":
        return [
            (mu, 0.0)
            for mu in cfg.get_floats("assimilate", "mu_grid",
                                     (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0))
        ]
    return [(0.0, 0.0)]


def cmd_assimilate(cfg: Config, data_dir: Path, models_dir: Path, out_dir: Path,
                   seed: int, jobs: int) -> int:
    spec = ode_spec_from(cfg)
    methods = cfg.get_strs(
        "assimilate", "methods", ("free-run", "ninn1", "ninn2-lookahead")
    )
    observed = cfg.get_ints("assimilate", "observed", (0,))
    substeps = cfg.get_int("assimilate", "substeps", 10)
    nudging_dt = cfg.get_float("assimilate", "nudging_dt", 1e-3)
    op = ObservationOperator(observed, spec.dim)
    net_label = cfg.get_str("model", "label", "model")

    model_path = models_dir / "model.bin"
    system = None
    if any(m != "nudging" for m in methods):
        if not model_path.exists():
            raise PipelineDataError(f"model file {model_path} does not exist")
        system = load_model(model_path)
        if system.state_dim != spec.dim:
            raise PipelineDataError(
                f"model state dimension {system.state_dim} does not match the "
                f"configured system dimension {spec.dim}"
            )

    obs_files = sorted(data_dir.glob("obs_*.csv"))
    if not obs_files:
        raise PipelineDataError(f"no observation checkpoint files in {data_dir}")
    checkpoints = [read_trajectory(p) for p in obs_files]

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    cells_meta = []
    for method in methods:
        for mu, lam in _grid_cells(cfg, method):
            schedule = NudgeSchedule(mu, lam, substeps)
            cell_dir = out_dir / _cell_dirname(method, mu, lam)
            cell_dir.mkdir(parents=True, exist_ok=True)
            for n, cps in enumerate(checkpoints):
                stream = ObservationStream.from_trajectory(cps, op)
                w0 = np.random.default_rng([seed, n]).normal(0.0, 10.0, spec.dim)
                model = spec if method == "nudging" else system
                result = run_assimilation(
                    method, model, stream, schedule, w0,
                    ref_checkpoints=cps,
                    dt=nudging_dt if method == "nudging" else None,
                    record_substeps=False,
                )
                states = result.estimates.states
                times = result.estimates.times
                if method == "nudging":
                    stride = int(round(stream.delta_t_obs / nudging_dt))
                    states = states[::stride]
                    times = times[::stride]
                run_path = cell_dir / f"run_{n:03d}.csv"
                write_result(run_path, times, states, result.checkpoint_errors)
                outputs.append(run_path)
            cell_meta = {
                "method": method,
                "mu": mu,
                "lambda_decay": lam,
                "substeps": substeps,
                "observed": list(op.observed),
                "n_runs": len(checkpoints),
                "system": cfg.get_str("experiment", "system"),
                "net_label": "ode" if method == "nudging" else net_label,
            }
            cell_path = cell_dir / "cell.json"
            with open(cell_path, "w") as fh:
                json.dump(cell_meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
            outputs.append(cell_path)
            cells_meta.append(cell_meta)

    write_manifest(
        out_dir, "assimilate", cfg, seed,
        {"methods": list(methods), "observed": list(op.observed),
         "substeps": substeps, "cells": len(cells_meta)},
        inputs=[model_path] if system is not None else [],
        outputs=outputs,
    )
    return EXIT_OK


def cmd_report(cfg: Config, result_dirs, out_dir: Path) -> int:
    k0 = cfg.get_int("protocol", "k0", 50)
    k_end = cfg.get_int("protocol", "K", 100)
    table = RmseTable()
    incomplete = False
    cells = []
    for rd in result_dirs:
        cells.extend(sorted(Path(rd).glob("**/cell.json")))
    for cell_path in cells:
        with open(cell_path) as fh:
            meta = json.load(fh)
        cell_dir = cell_path.parent
        run_files = sorted(cell_dir.glob("run_*.csv"))
        pattern = ";".join(str(i) for i in meta["observed"])
        if len(run_files) < meta["n_runs"]:
            incomplete = True
            table.add(
                RmseRow(meta["system"], meta["net_label"], meta["method"],
                        pattern, meta["mu"], meta["lambda_decay"], math.nan)
            )
            continue
        total = 0.0
        ok = True
        for path in run_files:
            _, _, errors = read_result(path)
            if len(errors) <= k_end:
                ok = False
                break
            window = errors[k0 : k_end + 1]
            if not np.all(np.isfinite(window)):
                total = math.inf
            elif math.isfinite(total):
                total += float(window @ window)
        if not ok:
            incomplete = True
            table.add(
                RmseRow(meta["system"], meta["net_label"], meta["method"],
                        pattern, meta["mu"], meta["lambda_decay"], math.nan)
            )
            continue
        value = (
            math.inf
            if math.isinf(total)
            else math.sqrt(total / ((k_end - k0) * len(run_files)))
        )
        table.add(
            RmseRow(meta["system"], meta["net_label"], meta["method"],
                    pattern, meta["mu"], meta["lambda_decay"], value)
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "rmse_table.csv"
    _write_report_table(table_path, table)
    return EXIT_INTERNAL if incomplete else EXIT_OK


def _write_report_table(path, table: RmseTable):
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(
            ["system", "net_label", "method", "obs_pattern", "mu",
             "lambda_decay", "rmse"]
        )
        for r in table.rows:
            if math.isnan(r.rmse):
                value = "incomplete"
            elif math.isinf(r.rmse):
                value = "Inf"
            else:
                value = repr(r.rmse)
            writer.writerow(
                [r.system, r.net_label, r.method, r.obs_pattern, repr(r.mu),
                 repr(r.lambda_decay), value]
            )


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nudgenet",
        description="Train residual-net surrogates of chaotic ODEs and steer "
                    "them toward observations.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, models=False, results=False):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="gen-data output dir")
        if models:
            p.add_argument("--models", required=True, help="train output dir")
        if results:
            p.add_argument("--results", required=True, nargs="+",
                           help="assimilate output dirs")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config master seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker cap (does not affect results)")

    common(sub.add_parser("gen-data", help="generate dataset and references"))
    common(sub.add_parser("train", help="train the configured system"), data=True)
    common(
        sub.add_parser("assimilate", help="run assimilation methods"),
        data=True, models=True,
    )
    common(sub.add_parser("report", help="aggregate rmse_table.csv"), results=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = Config(args.config)
        if args.command == "report":
            return cmd_report(cfg, args.results, Path(args.out))
        seed = seed_from(cfg, args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, Path(args.out), seed, args.jobs)
        if args.command == "train":
            return cmd_train(cfg, Path(args.data), Path(args.out), seed, args.jobs)
        if args.command == "assimilate":
            return cmd_assimilate(
                cfg, Path(args.data), Path(args.models), Path(args.out), seed,
                args.jobs,
            )
        raise ValueError(f"unhandled command {args.command}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineDataError, ModelIOError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ScheduleError as err:
        print(f"schedule error: {err}", file=sys.stderr)
        return EXIT_SCHEDULE
    except Exception as err:  # noqa: BLE001 - the contract maps these to exit 1
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
