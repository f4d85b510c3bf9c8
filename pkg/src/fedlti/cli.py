"""Command-line entry point: ``fedlti <command> [--config PATH] [--seed N] [--out DIR] [--jobs N]``.

Configuration is a JSON document with optional sections ``system``,
``training``, ``query``, ``privacy``, ``sweep`` and ``diagnose``; anything
missing falls back to :data:`DEFAULT_CONFIG`. Unknown keys are rejected.
Every command writes its resolved configuration and a ``manifest.json``
into the output directory, so ``fedlti <command> --config DIR/config.json``
reproduces the same files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .counterfactual import AteQuery, ate_client_phi, ate_measurement, ate_state_server, monte_carlo_ate
from .diagnostics import diagnose, write_diagnostics_csv
from .errors import ConfigError, DivergenceError
from .estimation import write_estimates_csv
from .experiments import (
    BENCHMARK_TRAINING,
    SystemSpec,
    reference_rows,
    run_sweep,
    write_sweep_table,
)
from .federation import (
    Boundary,
    RoundConfig,
    TrainingHistory,
    TrainingState,
    evaluate,
    initial_state,
    prepare_data,
    private_boundary,
    run_training,
)
from .privacy import (
    ChannelReport,
    compose,
    default_audit_setup,
    analytic_bounds,
    required_sigma,
    run_audit,
    write_privacy_report,
)
from .systems import GlobalSystem, Trajectory, simulate

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_AUDIT = 0, 2, 3, 4, 5

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "system": asdict(SystemSpec()),
    "training": dict(BENCHMARK_TRAINING),
    "init": "random",
    "query": {
        "level": "q1",
        "target": 1,
        "source": 0,
        "u0": None,
        "u1": None,
        "time": 1,
        "trials": 10000,
        "paired": True,
    },
    "privacy": {
        "epsilon_msg": 1.0,
        "delta_msg": 1e-5,
        "epsilon_grad": 1.0,
        "delta_grad": 1e-5,
        "r_y": 10.0,
        "r_u": 10.0,
        "c_msg": None,
        "c_grad": None,
        "rounds": None,
        "audit_trials": 100,
        "audit_horizon": 50,
    },
    "sweep": {"axis": "M", "values": [2, 4, 8], "seeds": [0, 1, 2]},
    "diagnose": {"horizon": 20000, "pe_order": 50},
}

_TRAINING_KEYS = set(RoundConfig().to_dict())


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration ------------------------------------------------------------


def _merge(defaults: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key!r} must be an object")
            if key == "training":
                # any RoundConfig key is allowed here; checked in load_config
                out[key] = {**defaults[key], **copy.deepcopy(value)}
            else:
                out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None, seed: int | None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        config = _merge(config, user, "")
    unknown = set(config["training"]) - _TRAINING_KEYS
    if unknown:
        raise ConfigError(f"unknown key training.{sorted(unknown)[0]!r}")
    if seed is not None:
        config["seed"] = seed
    try:
        SystemSpec(**config["system"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def _system_spec(config: dict) -> SystemSpec:
    return SystemSpec(**config["system"])


def _round_config(config: dict) -> RoundConfig:
    return RoundConfig.from_dict({"max_iterations": 1, **config["training"], "seed": config["seed"]})


# -- output helpers --------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory: {exc}", EXIT_IO) from exc
    return out


def write_manifest(out: Path, command: str, config: dict, config_path: str | None, outputs: list[str]) -> None:
    text = json.dumps(config, sort_keys=True, indent=2)
    (out / "config.json").write_text(text + "\n", encoding="utf-8")
    manifest = {
        "command": command,
        "config_path": config_path,
        "config_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
        "seed": config["seed"],
        "output_dir": str(out),
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "outputs": {name: _sha256_file(out / name) for name in sorted(outputs) if (out / name).is_file()},
    }
    # commands sharing a directory each keep their own entry
    path = out / "manifest.json"
    runs = {}
    if path.exists():
        try:
            runs = json.loads(path.read_text(encoding="utf-8")).get("runs", {})
        except (json.JSONDecodeError, AttributeError):
            runs = {}
    runs[command] = manifest
    path.write_text(json.dumps({**manifest, "runs": runs}, indent=2) + "\n", encoding="utf-8")


def _load_data(data_dir: Path) -> tuple[GlobalSystem, Trajectory]:
    try:
        system = GlobalSystem.load(data_dir / "system.json")
        traj = Trajectory.from_csv(data_dir / "trajectory.csv", system.partition)
    except FileNotFoundError as exc:
        raise CliError(f"missing artifact {exc.filename}; run 'fedlti generate' first", EXIT_IO) from exc
    return system, traj


def _load_state(path: Path) -> TrainingState:
    try:
        return TrainingState.load(path)
    except FileNotFoundError as exc:
        raise CliError(f"missing artifact {exc.filename}; run 'fedlti train' first", EXIT_IO) from exc


def _vector(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse vector {text!r}") from exc


# -- commands -------------------------------------------------------------------


def cmd_generate(args, config: dict) -> list[str]:
    out = _prepare_out(args.out)
    if args.horizon is not None:
        config["system"]["horizon"] = args.horizon
    system, traj = _system_spec(config).build(config["seed"])
    system.save(out / "system.json")
    traj.to_csv(out / "trajectory.csv")
    data = prepare_data(system, traj)
    write_estimates_csv(out / "estimates.csv", {m: c.filter for m, c in enumerate(data.clients)})
    print(f"system: M={system.client_count} P={system.partition.P} U={system.partition.U} D={system.partition.D}, T={traj.horizon}")
    return ["system.json", "trajectory.csv", "estimates.csv"]


def write_blocks_table(path: Path, state: TrainingState, system: GlobalSystem) -> None:
    """Estimated and true off-diagonal blocks, one row per matrix entry."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "m", "n", "row", "col", "estimated", "truth"])
        for name, table in (("A", state.estimates.A_hat), ("B", state.estimates.B_hat)):
            for (m, n), est in sorted(table.items()):
                truth = system.block(name, m, n)
                for i in range(est.shape[0]):
                    for j in range(est.shape[1]):
                        writer.writerow([name, m, n, i, j, repr(float(est[i, j])), repr(float(truth[i, j]))])


PLOT_SCRIPT = '''"""Plot a training history written by ``fedlti train`` (requires matplotlib)."""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "history.csv"
with open(path, newline="") as fh:
    rows = list(csv.DictReader(fh))
it = [int(r["iteration"]) for r in rows]
clients = sorted({k.split("_")[-1] for k in rows[0] if k.startswith("L_ma_")})
fig, ax = plt.subplots(2, 2, figsize=(10, 7))
ax[0, 0].plot(it, [float(r["L_s"]) for r in rows])
ax[0, 0].set_title("server loss")
for m in clients:
    ax[0, 1].plot(it, [float(r[f"L_ma_{m}"]) for r in rows], label=f"augmented {m}")
    ax[0, 1].plot(it, [float(r[f"baseline_{m}"]) for r in rows], "--", label=f"proprietary {m}")
    ax[1, 1].plot(it, [float(r[f"delta_d_{m}"]) for r in rows], label=f"client {m}")
ax[0, 1].set_title("client losses")
ax[0, 1].legend()
ax[1, 0].plot(it, [sum(float(r[f"D_{m}"]) for m in clients) for r in rows])
ax[1, 0].set_title("disentanglement penalty")
ax[1, 1].set_title("delta d")
ax[1, 1].legend()
for a in ax.flat:
    a.set_yscale("log")
    a.set_xlabel("iteration")
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=120)
'''


def cmd_train(args, config: dict) -> list[str]:
    out = _prepare_out(args.out)
    system, traj = _load_data(args.data or args.out)
    iterations = config["training"].get("max_iterations", RoundConfig().max_iterations)
    rc = _round_config(config) if iterations > 0 else None
    dp = config["training"].get("dp")
    clip = None
    boundary, ledger = Boundary(), None

    if args.resume is not None:
        state = _load_state(args.resume)
    else:
        state = initial_state(system.partition, config["seed"], config["init"])
    if dp is not None and rc is not None:
        priv = private_boundary(system, traj, state, rc)
        boundary, ledger, clip = priv.boundary, priv.ledger, priv.clip
    data = prepare_data(system, traj, clip=clip)

    prior_rows: list[str] = []
    if args.resume is not None and (out / "history.csv").exists():
        lines = (out / "history.csv").read_bytes().splitlines(keepends=True)
        prior_rows = [ln for ln in lines[1:] if int(ln.split(b",", 1)[0]) < state.iteration]

    if rc is None:
        history = TrainingHistory(final=evaluate(state, data, config["training"].get("xi", 1.0)), state=state)
    else:
        history = run_training(data, rc, state, boundary, ledger)
    history.to_csv(out / "history.csv")
    if prior_rows:
        lines = (out / "history.csv").read_bytes().splitlines(keepends=True)
        (out / "history.csv").write_bytes(b"".join(lines[:1] + prior_rows + lines[1:]))

    final = history.state
    final.save(out / "state.json")
    outputs = ["history.csv", "state.json", "blocks.csv", "diagnostics.csv", "plot_history.py"]
    if history.snapshots:
        (out / "snapshots").mkdir(exist_ok=True)
        for k, snap in sorted(history.snapshots.items()):
            snap.save(out / "snapshots" / f"state_{k:06d}.json")
    write_blocks_table(out / "blocks.csv", final, system)
    report = diagnose(final.params, final.estimates, system, traj, final.iteration, config["diagnose"]["pe_order"])
    write_diagnostics_csv(out / "diagnostics.csv", [report])
    (out / "plot_history.py").write_text(PLOT_SCRIPT, encoding="utf-8")

    f = history.final
    print(f"rounds: {final.iteration}  L_s: {f.L_s:.6g}  D: {f.disentanglement:.6g}")
    for m in range(len(f.L_ma)):
        print(f"client {m}: L_ma {f.L_ma[m]:.6g}  baseline {f.baseline[m]:.6g}  delta_d {f.delta_d[m]:.6g}")
    if history.records and f.L_s > history.records[0].L_s:
        print("warning: server loss increased over training; consider smaller step sizes or a larger privacy budget", file=sys.stderr)
    if ledger is not None:
        print(f"privacy budget after {ledger.rounds} rounds: epsilon {ledger.epsilon_total:.6g}, delta {ledger.delta_total:.6g}")
    return outputs


def cmd_query(args, config: dict) -> list[str]:
    out = _prepare_out(args.out)
    q = config["query"]
    level = args.level or q["level"]
    if level not in ("q1", "q2", "q3"):
        raise ConfigError(f"level must be q1, q2 or q3, got {level!r}")
    system, traj = _load_data(args.data or args.out)
    p = system.partition
    target = q["target"] if args.target is None else args.target
    source = q["source"] if args.source is None else args.source
    u0 = _vector(args.u0) if args.u0 is not None else q["u0"]
    u1 = _vector(args.u1) if args.u1 is not None else q["u1"]

    if level == "q3":
        state = _load_state((args.state or (args.data or args.out) / "state.json"))
        phi = state.params[target].phi
        phi0 = np.zeros_like(phi) if u0 is None else np.asarray(u0, dtype=float)
        phi1 = phi if u1 is None else np.asarray(u1, dtype=float)
        result = ate_client_phi(system.block("C", target, target), phi0, phi1)
        mc = None
    else:
        n_in = p.input_dims[source]
        u0 = np.zeros(n_in) if u0 is None else np.asarray(u0, dtype=float)
        u1 = np.ones(n_in) if u1 is None else np.asarray(u1, dtype=float)
        query = AteQuery(target, source, u0, u1, args.time or q["time"])
        if level == "q1":
            result = ate_measurement(system.block("C", target, target), system.block("B", target, source), u0, u1)
        else:
            state = _load_state((args.state or (args.data or args.out) / "state.json"))
            result = ate_state_server(state.estimates.B_hat.get((target, source)), u0, u1)
        mc = None
        if args.oracle:
            trials = args.trials or q["trials"]
            mc = monte_carlo_ate(system, query, trials, config["seed"], traj, paired=q["paired"])

    print(f"{level} effect: " + " ".join(f"{x:.10g}" for x in result.effect))
    outputs = ["ate.csv"]
    result.to_csv(out / "ate.csv")
    if mc is not None:
        print("monte-carlo:  " + " ".join(f"{x:.10g}" for x in mc.effect))
        print("std. error:   " + " ".join(f"{x:.3g}" for x in mc.standard_error))
        mc.to_csv(out / "ate_monte_carlo.csv")
        outputs.append("ate_monte_carlo.csv")
    return outputs


def cmd_privacy(args, config: dict) -> list[str]:
    out = _prepare_out(args.out)
    pc = config["privacy"]
    eps_m = args.epsilon if args.epsilon is not None else pc["epsilon_msg"]
    eps_g = args.epsilon if args.epsilon is not None else pc["epsilon_grad"]
    del_m = args.delta if args.delta is not None else pc["delta_msg"]
    del_g = args.delta if args.delta is not None else pc["delta_grad"]
    rounds = args.rounds if args.rounds is not None else pc["rounds"]
    if rounds is None:
        rounds = config["training"].get("max_iterations", RoundConfig().max_iterations)

    data_dir = args.data or args.out
    if (data_dir / "system.json").exists():
        system = GlobalSystem.load(data_dir / "system.json")
    else:
        system, _ = _system_spec(config).build(config["seed"])
    setup = default_audit_setup(system, pc["audit_horizon"], config["seed"])
    r_max = max(pc["r_y"], pc["r_u"])
    bounds = analytic_bounds(setup, r_max)
    d_msg, d_grad = float(bounds.delta_msg.max()), float(bounds.delta_server.max())
    c_msg = pc["c_msg"] if pc["c_msg"] is not None else d_msg
    c_grad = pc["c_grad"] if pc["c_grad"] is not None else d_grad
    s_msg = required_sigma(d_msg, c_msg, eps_m, del_m)
    s_grad = required_sigma(d_grad, c_grad, eps_g, del_g)
    eps_total, delta_total = compose(rounds, eps_m, del_m, eps_g, del_g)

    empirical = {"message": None, "gradient": None}
    passed = True
    if args.audit:
        audit = run_audit(setup, pc["audit_trials"], r_max, config["seed"], bounds)
        for stage, res in audit.items():
            empirical[stage] = res.max_deviation
            print(f"audit {stage}: {'PASS' if res.passed else 'FAIL'} (max deviation {res.max_deviation:.6g}, worst ratio to bound {res.max_ratio:.4f})")
            passed &= res.passed

    rows = [
        ChannelReport("message", d_msg, empirical["message"], c_msg, s_msg, eps_m, del_m, rounds, eps_total, delta_total),
        ChannelReport("gradient", d_grad, empirical["gradient"], c_grad, s_grad, eps_g, del_g, rounds, eps_total, delta_total),
    ]
    for r in rows:
        print(f"{r.channel}: Delta {r.delta_analytic:.6g}  C {r.clip:.6g}  sigma {r.sigma:.6g}")
    print(f"total over {rounds} rounds: epsilon {eps_total:.6g}, delta {delta_total:.6g}")
    write_privacy_report(out / "privacy_report.csv", rows)
    if not passed:
        raise CliError("sensitivity audit failed", EXIT_AUDIT)
    return ["privacy_report.csv"]


def cmd_sweep(args, config: dict) -> list[str]:
    out = _prepare_out(args.out)
    sw = config["sweep"]
    axis = sw["axis"]
    if axis not in ("M", "D_m"):
        raise ConfigError("sweep.axis must be 'M' or 'D_m'")
    base = _system_spec(config)
    rows = run_sweep(axis, sw["values"], base, config["training"], sw["seeds"], out / "cells", args.jobs)
    rows += reference_rows(axis, sw["values"])
    write_sweep_table(out / "sweep.csv", rows)
    for r in rows:
        print(f"{r.kind:9s} {r.axis}={r.value:<4d} L_s {r.L_s_mean:.4g}  D {r.D_mean:.4g}  failures {r.failures}")
    return ["sweep.csv"]


def cmd_diagnose(args, config: dict) -> list[str]:
    out = _prepare_out(args.out)
    data_dir = args.data or args.out
    system, traj = _load_data(data_dir)
    state = _load_state(args.state or data_dir / "state.json")
    horizon = config["diagnose"]["horizon"]
    if horizon is not None and horizon != traj.horizon:
        # fresh evaluation data from the same system
        traj = simulate(system, horizon, config["seed"] + 1000)
    report = diagnose(state.params, state.estimates, system, traj, state.iteration, config["diagnose"]["pe_order"])
    write_diagnostics_csv(out / "diagnostics.csv", [report])
    for row in report.rows():
        print(
            f"client {row['client']}: D {row['D']:.4g}  delta_d {row['delta_d']:.4g}  "
            f"theta residual {row['theta_residual']:.4g}  oracle gap |z| max {row['gap_max_z']:.2f}"
        )
    print(f"persistent excitation: {'pass' if report.pe_passed else 'fail'} (alpha {report.pe_alpha:.4g})")
    return ["diagnostics.csv"]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "query": cmd_query,
    "privacy": cmd_privacy,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")

    parser = argparse.ArgumentParser(prog="fedlti", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate a system and simulate a trajectory")
    p.add_argument("--horizon", "-T", type=int, help="trajectory length")

    p = sub.add_parser("train", parents=[common], help="run federated training")
    p.add_argument("--data", type=Path, help="directory written by 'generate' (default: --out)")
    p.add_argument("--resume", type=Path, help="continue from a saved state or snapshot")

    p = sub.add_parser("query", parents=[common], help="average treatment effect queries")
    p.add_argument("--data", type=Path)
    p.add_argument("--state", type=Path, help="trained state (default: DATA/state.json)")
    p.add_argument("--level", help="q1 (measurement), q2 (server state) or q3 (client aggregate)")
    p.add_argument("--target", type=int)
    p.add_argument("--source", type=int)
    p.add_argument("--u0", help="comma-separated control value (phi0 for q3)")
    p.add_argument("--u1", help="comma-separated treatment value (phi1 for q3)")
    p.add_argument("--time", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--oracle", action="store_true", help="compare with a Monte-Carlo do-intervention")

    p = sub.add_parser("privacy", parents=[common], help="noise calibration, budget and sensitivity audit")
    p.add_argument("--data", type=Path)
    p.add_argument("--epsilon", type=float, help="per-round epsilon for both channels")
    p.add_argument("--delta", type=float, help="per-round delta for both channels")
    p.add_argument("--rounds", type=int)
    p.add_argument("--audit", action="store_true")

    sub.add_parser("sweep", parents=[common], help="scalability sweep")

    p = sub.add_parser("diagnose", parents=[common], help="stationarity and oracle diagnostics")
    p.add_argument("--data", type=Path)
    p.add_argument("--state", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        outputs = COMMANDS[args.command](args, config)
        write_manifest(args.out, args.command, config, args.config, outputs)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
