"""Command line front end.

Subcommands: simulate, filter, deriv, oracle, variance-study, rate-study,
rml. Every subcommand reads an optional JSON config file; command line
flags override config entries. All delimited outputs carry ``# key=value``
metadata lines and are byte-identical across reruns with the same config
and seed. Study subcommands also render a figure next to the delimited
output unless --no-plot is given.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harness, oracle, report
from .fderiv import estimator_hooks
from .rml import StepSizeSchedule, default_clamp
from .smc import bootstrap_step, init_cloud
from .testfns import make_test_function

log = logging.getLogger("pfgrad")


def _load(args) -> dict:
    return cfgmod.load_config(args.config) if args.config else {}


def _pick(cfg: dict, key: str, flag_value, default=None):
    if flag_value is not None:
        return flag_value
    return cfg.get(key, default)


def _require(value, name: str):
    if value is None:
        raise SystemExit(f"missing required setting {name!r} (flag or config)")
    return value


def _model_from(cfg: dict, args):
    model_cfg = dict(cfg.get("model", {}))
    if getattr(args, "model_kind", None):
        model_cfg["kind"] = args.model_kind
    if getattr(args, "theta", None):
        model_cfg["theta"] = [float(v) for v in args.theta.split(",")]
    if getattr(args, "n_hidden_states", None):
        model_cfg["K"] = args.n_hidden_states
    if getattr(args, "n_symbols", None):
        model_cfg["M"] = args.n_symbols
    if "kind" not in model_cfg:
        raise SystemExit("missing model (config key 'model' or --model-kind/--theta flags)")
    model, theta = cfgmod.model_from_config(model_cfg)
    return model, theta, model_cfg


def _meta_for(model_cfg: dict, seed) -> dict:
    meta = {"model": model_cfg["kind"], "theta": ",".join(repr(float(v)) for v in model_cfg["theta"])}
    if model_cfg["kind"] == "hmm":
        meta["K"] = model_cfg["K"]
        meta["M"] = model_cfg.get("M", model_cfg["K"])
    meta["seed"] = seed
    return meta


def _figure_path(out: str) -> Path:
    return Path(out).with_suffix(".png")


def _observations(cfg: dict, args, model, theta, seed_key="data_seed"):
    data = _pick(cfg, "data", getattr(args, "data", None))
    if data:
        ys, _ = cfgmod.read_observations(data)
        return ys, {"data": data}
    horizon = _require(_pick(cfg, "horizon", getattr(args, "horizon", None)), "horizon")
    data_seed = _pick(cfg, seed_key, getattr(args, "data_seed", None))
    data_seed = int(data_seed) if data_seed is not None else 1000 + int(_pick(cfg, "seed", args.seed, 0))
    _, ys = harness.simulate(model, theta, int(horizon), np.random.default_rng(data_seed))
    return ys, {"data_seed": data_seed}


def cmd_simulate(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    seed = int(_pick(cfg, "seed", args.seed, 0))
    steps = int(_require(_pick(cfg, "steps", args.steps), "steps"))
    _, ys = harness.simulate(model, theta, steps, np.random.default_rng(seed))
    cfgmod.write_observations(args.out, ys, _meta_for(model_cfg, seed))
    log.info("wrote %d observations to %s", len(ys), args.out)


def _trace_rows(model, theta, ys, n_particles, estimator, phi, rng):
    init_table, advance, zeta_of = estimator_hooks(estimator)
    cloud = init_cloud(model, theta, n_particles, rng)
    table = init_table(model, theta, cloud)
    for n in range(len(ys)):
        if n > 0:
            cloud, table = advance(model, theta, cloud, table, ys[n - 1], rng)
        zeta_val = zeta_of(cloud, table).evaluate(phi)
        eta_val = float(np.mean(phi(cloud.particles)))
        for r in range(theta.dim):
            yield n, theta.names[r], float(zeta_val[r]), eta_val


def cmd_filter(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    seed = int(_pick(cfg, "seed", args.seed, 0))
    n_particles = int(_require(_pick(cfg, "n_particles", args.particles), "n_particles"))
    phi = make_test_function(_pick(cfg, "phi", args.phi, "coord:0"))
    ys, _ = cfgmod.read_observations(args.data)
    rng = np.random.default_rng(seed)
    cloud = init_cloud(model, theta, n_particles, rng)
    rows = []
    for n in range(len(ys)):
        if n > 0:
            cloud = bootstrap_step(model, theta, cloud, ys[n - 1], rng)
        rows.append((n, float(np.mean(phi(cloud.particles)))))
    meta = _meta_for(model_cfg, seed) | {"n_particles": n_particles, "data": args.data}
    cfgmod.write_csv(args.out, meta, ["n", "eta_phi"], rows)


def cmd_deriv(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    seed = int(_pick(cfg, "seed", args.seed, 0))
    n_particles = int(_require(_pick(cfg, "n_particles", args.particles), "n_particles"))
    estimator = _pick(cfg, "estimator", args.estimator, "backward")
    phi = make_test_function(_pick(cfg, "phi", args.phi, "coord:0"))
    ys, _ = cfgmod.read_observations(args.data)
    rows = _trace_rows(model, theta, ys, n_particles, estimator, phi, np.random.default_rng(seed))
    meta = _meta_for(model_cfg, seed) | {
        "n_particles": n_particles,
        "estimator": estimator,
        "data": args.data,
    }
    cfgmod.write_csv(args.out, meta, ["n", "coord", "zeta_phi", "eta_phi"], rows)


def cmd_oracle(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    phi = make_test_function(_pick(cfg, "phi", args.phi, "coord:0"))
    ys, _ = cfgmod.read_observations(args.data)
    meta = _meta_for(model_cfg, "exact") | {"data": args.data}
    rows = []
    if model_cfg["kind"] == "hmm":
        state = oracle.exact_hmm_init(model, theta)
        states = np.arange(model.n_states)
        phi_states = np.asarray(phi(states), dtype=float)
        for n, y in enumerate(ys):
            inc = oracle.exact_score_increment(model, theta, state, y)
            zeta_val = oracle.exact_zeta_phi(state, phi)
            eta_val = float(phi_states @ state.eta)
            for r in range(theta.dim):
                rows.append((n, theta.names[r], eta_val, float(zeta_val[r]), float(inc[r])))
            state = oracle.exact_hmm_step(model, theta, state, y)
    elif model_cfg["kind"] == "lgssm":
        _, incs, _ = oracle.tangent_kalman_score(model, theta, ys)
        for n in range(len(ys)):
            for r in range(theta.dim):
                rows.append((n, theta.names[r], "", "", float(incs[n, r])))
    else:
        raise SystemExit(f"no exact computation available for model kind {model_cfg['kind']!r}")
    cfgmod.write_csv(args.out, meta, ["n", "coord", "eta_phi", "zeta_phi", "score_increment"], rows)


def cmd_variance_study(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    seed = int(_pick(cfg, "seed", args.seed, 0))
    estimator = _pick(cfg, "estimator", args.estimator, "backward")
    n_particles = int(_require(_pick(cfg, "n_particles", args.particles), "n_particles"))
    block_len = int(_require(_pick(cfg, "block_len", args.block_len), "block_len"))
    grid = _pick(cfg, "grid", [int(v) for v in args.grid.split(",")] if args.grid else None)
    grid = [int(v) for v in _require(grid, "grid")]
    n_reps = int(_require(_pick(cfg, "n_reps", args.reps), "n_reps"))
    workers = int(_pick(cfg, "workers", args.workers, 1))
    if not cfg.get("horizon") and args.horizon is None:
        cfg = dict(cfg, horizon=max(grid) + block_len)
    ys, data_meta = _observations(cfg, args, model, theta)
    curve = harness.run_variance_study(
        model, theta, ys,
        estimator=estimator, n_particles=n_particles, grid=grid,
        block_len=block_len, n_reps=n_reps, seed=seed, workers=workers,
    )
    meta = _meta_for(model_cfg, seed) | data_meta | {
        "estimator": estimator,
        "n_particles": n_particles,
        "block_len": block_len,
        "n_reps_used": curve.n_reps_used,
        "n_excluded": curve.n_excluded,
    }
    for r, name in enumerate(theta.names):
        fit = curve.fits[r]
        meta[f"slope_{name}"] = repr(fit.slope)
        meta[f"slope_ci_{name}"] = f"{fit.ci_low!r}..{fit.ci_high!r}"
    rows = [
        (int(n), theta.names[r], float(curve.variances[gi, r]))
        for gi, n in enumerate(curve.grid)
        for r in range(theta.dim)
    ]
    cfgmod.write_csv(args.out, meta, ["n", "coord", "variance"], rows)
    if not args.no_plot:
        report.render_variance_figure(curve, theta.names, _figure_path(args.out))


def cmd_rate_study(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    seed = int(_pick(cfg, "seed", args.seed, 0))
    horizon = int(_require(_pick(cfg, "horizon", args.horizon), "horizon"))
    n_grid = _pick(cfg, "n_grid", [int(v) for v in args.n_grid.split(",")] if args.n_grid else None)
    n_grid = [int(v) for v in _require(n_grid, "n_grid")]
    n_reps = int(_require(_pick(cfg, "n_reps", args.reps), "n_reps"))
    phi = make_test_function(_pick(cfg, "phi", args.phi, "indicator:0"))
    workers = int(_pick(cfg, "workers", args.workers, 1))
    ys, data_meta = _observations(cfg, args, model, theta)
    curve = harness.run_rate_study(
        model, theta, ys,
        n_grid=n_grid, horizon=horizon, phi=phi, n_reps=n_reps, seed=seed, workers=workers,
    )
    meta = _meta_for(model_cfg, seed) | data_meta | {"horizon": horizon, "n_reps": n_reps}
    for label, fit in (("zeta", curve.zeta_fit), ("eta", curve.eta_fit)):
        if fit is not None:
            meta[f"loglog_slope_{label}"] = repr(fit.slope)
            meta[f"loglog_slope_ci_{label}"] = f"{fit.ci_low!r}..{fit.ci_high!r}"
    rows = [
        (int(n), float(curve.rmse_zeta[qi]), float(curve.rmse_eta[qi]))
        for qi, n in enumerate(curve.n_grid)
    ]
    cfgmod.write_csv(args.out, meta, ["n_particles", "rmse_zeta", "rmse_eta"], rows)
    if not args.no_plot:
        report.render_rate_figure(curve, _figure_path(args.out))


def cmd_rml(args) -> None:
    cfg = _load(args)
    model, theta, model_cfg = _model_from(cfg, args)
    seed = int(_pick(cfg, "seed", args.seed, 0))
    n_particles = int(_require(_pick(cfg, "n_particles", args.particles), "n_particles"))
    estimator = _pick(cfg, "estimator", args.estimator, "backward")
    schedule = StepSizeSchedule.parse(_require(_pick(cfg, "schedule", args.schedule), "schedule"))
    theta0_vals = _pick(cfg, "theta0", [float(v) for v in args.theta0.split(",")] if args.theta0 else None)
    theta0 = theta.replace(np.asarray(_require(theta0_vals, "theta0"), dtype=float))
    window = int(_pick(cfg, "converged_window", args.converged_window, 1000))
    ys, data_meta = _observations(cfg, args, model, theta)
    trace = harness.run_rml(
        model, theta0, ys, schedule,
        n_particles=n_particles, estimator=estimator, seed=seed,
        clamp=default_clamp(model), converged_window=window,
        log_every=int(_pick(cfg, "log_every", None, 0) or 0),
    )
    meta = _meta_for(model_cfg, seed) | data_meta | {
        "n_particles": n_particles,
        "estimator": estimator,
        "schedule": schedule.spec_string(),
        "theta0": ",".join(repr(float(v)) for v in theta0.values),
        "converged_window": window,
        "clamp_events": trace.clamp_events,
        "converged": ",".join(repr(float(v)) for v in trace.converged),
    }
    header = ["n", *theta.names, "increment_norm", "gamma"]
    rows = (
        (n, *(float(v) for v in trace.thetas[n]), float(trace.increments[n]), float(trace.gammas[n]))
        for n in range(trace.thetas.shape[0])
    )
    cfgmod.write_csv(args.out, meta, header, rows)
    if not args.no_plot:
        report.render_rml_figure(trace, _figure_path(args.out), theta_star=theta.values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, particles=False, plot=False):
        p.add_argument("--config", help="JSON config file; flags override its entries")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--model-kind", choices=cfgmod.MODEL_KINDS, dest="model_kind")
        p.add_argument("--theta", help="comma separated parameter values")
        p.add_argument("--K", type=int, dest="n_hidden_states", help="state count (hmm)")
        p.add_argument("--M", type=int, dest="n_symbols", help="alphabet size (hmm)")
        if data:
            p.add_argument("--data", help="observation CSV (from the simulate subcommand)")
        if particles:
            p.add_argument("--particles", type=int, default=None)
        if plot:
            p.add_argument("--no-plot", action="store_true", help="skip the figure next to the CSV")

    p = sub.add_parser("simulate", help="draw an observation record from a model")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(entry=cmd_simulate)

    p = sub.add_parser("filter", help="bootstrap filter trace of a test function")
    common(p, data=True, particles=True)
    p.add_argument("--phi", default=None, help="test function spec, e.g. indicator:0")
    p.set_defaults(entry=cmd_filter)

    p = sub.add_parser("deriv", help="filter derivative trace of a test function")
    common(p, data=True, particles=True)
    p.add_argument("--phi", default=None)
    p.add_argument("--estimator", choices=("backward", "path"), default=None)
    p.set_defaults(entry=cmd_deriv)

    p = sub.add_parser("oracle", help="exact filter/derivative/score trace")
    common(p, data=True)
    p.add_argument("--phi", default=None)
    p.set_defaults(entry=cmd_oracle)

    p = sub.add_parser("variance-study", help="variance of block score estimates over time")
    common(p, data=True, particles=True, plot=True)
    p.add_argument("--estimator", choices=("backward", "path"), default=None)
    p.add_argument("--block-len", type=int, dest="block_len", default=None)
    p.add_argument("--grid", help="comma separated block start times")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--data-seed", type=int, dest="data_seed", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(entry=cmd_variance_study)

    p = sub.add_parser("rate-study", help="error decay against the exact recursion")
    common(p, data=True, plot=True)
    p.add_argument("--n-grid", dest="n_grid", help="comma separated particle counts")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--phi", default=None)
    p.add_argument("--data-seed", type=int, dest="data_seed", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(entry=cmd_rate_study)

    p = sub.add_parser("rml", help="online parameter estimation run")
    common(p, data=True, particles=True, plot=True)
    p.add_argument("--estimator", choices=("backward", "path"), default=None)
    p.add_argument("--schedule", help="e.g. flat-then-decay:0.01,100000,50000,0.6")
    p.add_argument("--theta0", help="comma separated starting parameter values")
    p.add_argument("--converged-window", type=int, dest="converged_window", default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--data-seed", type=int, dest="data_seed", default=None)
    p.set_defaults(entry=cmd_rml)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    args.entry(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
