"""Config-driven command-line front end.

Subcommands: gen-data, run, sweep, bounds, privacy, plan.  Exit codes:
0 success, 2 configuration error, 3 numeric failure.  FALD_THREADS caps the
number of worker processes (0 or unset = all CPUs); the emitted CSV bytes are
identical for every thread count.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import engine, metrics, model as model_mod, privacy, theory
from .config import ConfigError, ExperimentConfig, parse_config_file, require
from .engine import (
    ChainDivergenceError,
    DecayingStep,
    FixedStep,
    FullDevice,
    RunConfig,
    SchemeI,
    SchemeII,
)
from .svgchart import line_chart

T_EPS_SMOOTHING_WINDOW = 5  # trailing moving average applied before the first crossing


def _workers() -> int:
    raw = os.environ.get("FALD_THREADS", "0")
    try:
        return engine.resolve_workers(int(raw))
    except ValueError:
        raise ConfigError(f"FALD_THREADS must be an integer, got {raw!r}") from None


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: List[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_keyvalues(path: Path, pairs) -> None:
    path.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in pairs), encoding="utf-8")


# ---------------------------------------------------------------------------
# model / run-config assembly


def build_model(cfg: ExperimentConfig, alpha: Optional[float] = None):
    """Instantiate the configured federation; logistic also returns test data."""
    alpha = cfg.alpha if alpha is None else alpha
    if cfg.model == "gaussian":
        sigma = cfg.sigma if cfg.sigma is not None else np.eye(cfg.dimension)
        spec = model_mod.gen_gaussian_federation(
            cfg.n_clients, alpha, cfg.points_per_client, sigma, cfg.seed, tau=cfg.tau or 1.0
        )
        return spec, None, None
    spec, test_x, test_y = model_mod.gen_logistic_federation(
        cfg.n_clients,
        alpha,
        cfg.points_per_client,
        cfg.n_features,
        cfg.n_classes,
        cfg.seed,
        ridge=cfg.ridge,
        tau=cfg.tau or 1.0,
        n_test=cfg.n_test,
    )
    return spec, test_x, test_y


def _scheme(name: str, s: Optional[int]):
    if name == "full":
        return FullDevice()
    if name == "scheme1":
        return SchemeI(s)
    return SchemeII(s)


def build_run_config(
    cfg: ExperimentConfig,
    spec,
    k_local: Optional[int] = None,
    rho: Optional[float] = None,
    eta: Optional[float] = None,
    scheme_spec=None,
) -> RunConfig:
    require(cfg, "horizon")
    if cfg.schedule == "decaying":
        consts = model_constants(cfg, spec)
        schedule = DecayingStep(consts.L, consts.m)
    else:
        eta = cfg.eta if eta is None else eta
        if eta is None:
            raise ConfigError("fixed schedule requires an eta")
        schedule = FixedStep(eta)
    scheme = scheme_spec if scheme_spec is not None else _scheme(cfg.scheme, cfg.s_devices)
    return RunConfig.for_model(
        spec,
        local_steps=cfg.k_local if k_local is None else k_local,
        tau=cfg.tau,
        rho=cfg.rho if rho is None else rho,
        schedule=schedule,
        scheme=scheme,
        subsample_ratio=cfg.subsample_ratio,
        horizon=cfg.horizon,
        master_seed=cfg.seed,
        init=np.asarray(cfg.init) if cfg.init is not None else None,
    )


# keyed by id() with the spec kept alive in the value so ids cannot be reused
_CONSTANTS_CACHE: dict = {}


def model_constants(cfg: ExperimentConfig, spec) -> model_mod.EnergyConstants:
    hit = _CONSTANTS_CACHE.get(id(spec))
    if hit is not None and hit[0] is spec:
        return hit[1]
    d = spec.dim
    init = np.asarray(cfg.init) if cfg.init is not None else np.zeros(d)
    star = model_mod.constants(spec, 0.0, subsample_ratio=1.0).theta_star
    radius = float(np.linalg.norm(init - star))
    consts = model_mod.constants(spec, radius, subsample_ratio=cfg.subsample_ratio, seed=cfg.seed)
    _CONSTANTS_CACHE[id(spec)] = (spec, consts)
    return consts


# ---------------------------------------------------------------------------
# metric curves


def gaussian_metric_rows(records: np.ndarray, target: metrics.GaussianSummary):
    """(round, w2, w2_mean, w2_cov) per communication round."""
    rows = []
    for r in range(records.shape[1]):
        summary = metrics.empirical_summary(records[:, r, :])
        total, mean_part, cov_part = metrics.w2_gaussian_parts(summary, target)
        rows.append((r, total, mean_part, cov_part))
    return rows


def logistic_metric_rows(cfg: ExperimentConfig, spec, records: np.ndarray, test_x, test_y):
    """(round, accuracy, brier, ece) at each sample-collection round.

    One parameter sample per replication is collected every ``collect_every``
    rounds after the warmup; predictions average over all samples collected so
    far, pooled across replications.
    """
    averager = metrics.RunningPredictiveAverage()
    rows = []
    R, n_rounds = records.shape[0], records.shape[1] - 1
    for r in range(cfg.warmup_rounds + cfg.collect_every, n_rounds + 1, cfg.collect_every):
        for rep in range(R):
            averager.add(model_mod.predict_proba(spec, records[rep, r, :], test_x))
        scored = metrics.classification_metrics(averager.records(test_y), cfg.ece_bins)
        rows.append((r, scored.accuracy, scored.brier, scored.ece))
    if not rows:
        raise ConfigError(
            "horizon ends before the first sample-collection round "
            f"(warmup_rounds + collect_every = {cfg.warmup_rounds + cfg.collect_every} rounds)"
        )
    return rows


def smoothed_first_crossing(rounds, values, eps: float, window: int = T_EPS_SMOOTHING_WINDOW):
    """First round whose trailing-window moving average is <= eps; inf if none."""
    acc = []
    for i, v in enumerate(values):
        acc.append(v)
        avg = float(np.mean(acc[-window:]))
        if avg <= eps:
            return int(rounds[i])
    return math.inf


def t_eps_of_rows(rows, eps: float):
    rounds = [row[0] for row in rows]
    w2 = [row[1] for row in rows]
    return smoothed_first_crossing(rounds, w2, eps)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, outdir: Path) -> int:
    spec, _, _ = build_model(cfg)
    path = outdir / "dataset.csv"
    model_mod.save_dataset_csv(spec.data, path)
    print(f"wrote {path}")
    return 0


def _run_one(cfg: ExperimentConfig, spec, run_cfg: RunConfig, workers: int):
    require(cfg, "replications")
    return engine.run_replicated(run_cfg, spec, cfg.replications, workers=workers)


def _trajectory_rows(records: np.ndarray, K: int):
    R, n_rows, d = records.shape
    for rep in range(R):
        for r in range(n_rows):
            yield (rep, r, r * K, *records[rep, r, :])


def cmd_run(cfg: ExperimentConfig, outdir: Path) -> int:
    spec, test_x, test_y = build_model(cfg)
    run_cfg = build_run_config(cfg, spec)
    if isinstance(run_cfg.schedule, FixedStep) and cfg.model == "gaussian":
        consts = model_constants(cfg, spec)
        if run_cfg.schedule.eta > 1.0 / (2.0 * consts.L):
            print(
                f"warning: eta = {run_cfg.schedule.eta:g} exceeds 1/(2L) = {1.0 / (2.0 * consts.L):g}; "
                "convergence bounds do not apply",
                file=sys.stderr,
            )
    records = _run_one(cfg, spec, run_cfg, _workers())

    d = spec.dim
    traj_path = outdir / "trajectory.csv"
    write_csv(
        traj_path,
        ["replication", "round", "iteration"] + [f"theta_{j + 1}" for j in range(d)],
        _trajectory_rows(records, run_cfg.local_steps),
    )

    summary_pairs = [("model", cfg.model), ("rounds", records.shape[1] - 1)]
    if cfg.model == "gaussian":
        rows = gaussian_metric_rows(records, model_mod.target_posterior(spec))
        write_csv(outdir / "run_metrics.csv", ["round", "w2", "w2_mean", "w2_cov"], rows)
        svg = line_chart(
            [("w2", [r[0] for r in rows], [r[1] for r in rows])],
            "sampling error by communication round",
            "communication round",
            "W2",
            log_y=True,
        )
        (outdir / "run_metrics.svg").write_text(svg, encoding="utf-8")
        tail = max(1, len(rows) // 4)
        summary_pairs.append(("plateau_w2", float(np.mean([r[1] for r in rows[-tail:]]))))
        if cfg.target_eps is not None:
            t_round = t_eps_of_rows(rows, cfg.target_eps)
            summary_pairs.append(("t_eps_rounds", t_round))
            summary_pairs.append(
                ("t_eps_iterations", t_round * run_cfg.local_steps if math.isfinite(t_round) else math.inf)
            )
    else:
        rows = logistic_metric_rows(cfg, spec, records, test_x, test_y)
        write_csv(outdir / "run_metrics.csv", ["round", "accuracy", "brier", "ece"], rows)
        series = [
            (name, [r[0] for r in rows], [r[i + 1] for r in rows])
            for i, name in enumerate(("accuracy", "brier", "ece"))
        ]
        svg = line_chart(series, "predictive metrics by communication round", "communication round", "value")
        (outdir / "run_metrics.svg").write_text(svg, encoding="utf-8")
    write_keyvalues(outdir / "summary.txt", summary_pairs)
    print(f"wrote {outdir / 'run_metrics.csv'}")
    return 0


def _sweep_points(cfg: ExperimentConfig, spec):
    """Yield (label, spec, run_cfg) per sweep value."""
    for value in cfg.sweep_values:
        if cfg.sweep == "k_local":
            yield str(value), spec, build_run_config(cfg, spec, k_local=int(value))
        elif cfg.sweep == "rho":
            yield repr(float(value)), spec, build_run_config(cfg, spec, rho=float(value))
        elif cfg.sweep == "eta":
            yield repr(float(value)), spec, build_run_config(cfg, spec, eta=float(value))
        elif cfg.sweep == "alpha":
            fresh, _, _ = build_model(cfg, alpha=float(value))
            yield repr(float(value)), fresh, build_run_config(cfg, fresh)
        else:  # s_scheme
            name, s = value
            label = name if s is None else f"{name}:{s}"
            yield label, spec, build_run_config(cfg, spec, scheme_spec=_scheme(name, s))


def cmd_sweep(cfg: ExperimentConfig, outdir: Path) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep command requires a sweep axis")
    spec, test_x, test_y = build_model(cfg)
    workers = _workers()
    long_rows = []
    t_eps_rows = []
    curves: dict = {}
    for label, point_spec, run_cfg in _sweep_points(cfg, spec):
        try:
            records = _run_one(cfg, point_spec, run_cfg, workers)
        except ChainDivergenceError as err:
            print(f"sweep value {label}: {err}", file=sys.stderr)
            long_rows.append((label, 0, "truncated", 1.0))
            if cfg.target_eps is not None:
                t_eps_rows.append((label, math.inf, math.inf))
            continue
        if cfg.model == "gaussian":
            rows = gaussian_metric_rows(records, model_mod.target_posterior(point_spec))
            for r, w2, w2_mean, w2_cov in rows:
                long_rows.append((label, r, "w2", w2))
            curves.setdefault("w2", []).append((label, [r[0] for r in rows], [r[1] for r in rows]))
            if cfg.target_eps is not None:
                t_round = t_eps_of_rows(rows, cfg.target_eps)
                t_iter = t_round * run_cfg.local_steps if math.isfinite(t_round) else math.inf
                t_eps_rows.append((label, t_round, t_iter))
        else:
            rows = logistic_metric_rows(cfg, point_spec, records, test_x, test_y)
            for r, acc, brier, ece in rows:
                long_rows.append((label, r, "accuracy", acc))
                long_rows.append((label, r, "brier", brier))
                long_rows.append((label, r, "ece", ece))
            for i, name in enumerate(("accuracy", "brier", "ece")):
                curves.setdefault(name, []).append((label, [r[0] for r in rows], [r[i + 1] for r in rows]))

    write_csv(outdir / "sweep.csv", ["sweep_value", "round", "metric", "value"], long_rows)
    for name, series in curves.items():
        svg = line_chart(
            series,
            f"{name} by communication round (sweep over {cfg.sweep})",
            "communication round",
            name,
            log_y=(name == "w2"),
        )
        (outdir / f"sweep_{name}.svg").write_text(svg, encoding="utf-8")
    if cfg.target_eps is not None:
        write_csv(outdir / "sweep_t_eps.csv", ["sweep_value", "t_eps_rounds", "t_eps_iterations"], t_eps_rows)
    print(f"wrote {outdir / 'sweep.csv'}")
    return 0


def _bound_inputs(cfg: ExperimentConfig, spec, run_cfg: RunConfig) -> theory.BoundInputs:
    consts = model_constants(cfg, spec)
    return theory.bound_inputs(
        consts,
        tau=cfg.tau,
        d=spec.dim,
        K=run_cfg.local_steps,
        rho=run_cfg.rho,
        N=cfg.n_clients,
        min_pc=float(np.min(spec.data.weights)),
        S=getattr(run_cfg.scheme, "s", None),
        scheme=run_cfg.scheme,
        eta=run_cfg.schedule.eta if isinstance(run_cfg.schedule, FixedStep) else None,
    )


def cmd_bounds(cfg: ExperimentConfig, outdir: Path) -> int:
    spec, _, _ = build_model(cfg)
    run_cfg = build_run_config(cfg, spec)
    inputs = _bound_inputs(cfg, spec, run_cfg)
    ks = np.arange(0, cfg.horizon + 1, run_cfg.local_steps)
    if isinstance(run_cfg.schedule, DecayingStep):
        evaluate = theory.bound_decaying
    elif isinstance(run_cfg.scheme, (SchemeI, SchemeII)):
        evaluate = theory.bound_partial
    else:
        evaluate = theory.bound_full_fixed
    rows = [(int(k), float(evaluate(inputs, int(k)))) for k in ks]
    write_csv(outdir / "bounds.csv", ["k", "bound"], rows)
    svg = line_chart(
        [("bound", [r[0] for r in rows], [r[1] for r in rows])],
        "convergence bound by iteration",
        "iteration",
        "W2 bound",
        log_y=True,
    )
    (outdir / "bounds.svg").write_text(svg, encoding="utf-8")
    print(f"wrote {outdir / 'bounds.csv'}")
    return 0


def _dp_params(cfg: ExperimentConfig, spec) -> privacy.DpParams:
    require(cfg, "delta_l", "horizon")
    scheme = _scheme(cfg.scheme, cfg.s_devices)
    return privacy.DpParams(
        delta_l=cfg.delta_l,
        q=cfg.subsample_ratio,
        eta=cfg.eta if cfg.eta is not None else 0.0,
        tau=cfg.tau,
        rho=cfg.rho,
        min_pc=float(np.min(spec.data.weights)),
        K=cfg.k_local,
        T=cfg.horizon,
        N=cfg.n_clients,
        scheme=scheme,
        delta0=cfg.delta0,
        delta1=cfg.delta1,
        delta2=cfg.delta2,
    )


def cmd_privacy(cfg: ExperimentConfig, outdir: Path) -> int:
    spec, _, _ = build_model(cfg)
    params = _dp_params(cfg, spec)
    limit = privacy.eta_max_dp(params)
    path = outdir / "privacy_report.txt"
    if params.eta > limit:
        write_keyvalues(path, [("error", "eta exceeds admissible maximum"), ("eta", params.eta), ("eta_max_dp", limit)])
        print(f"eta = {params.eta:g} exceeds eta_max_dp = {limit:g}; see {path}", file=sys.stderr)
        return 2
    report = list(privacy.account_report(params).items())
    if cfg.eps_star is not None and cfg.delta_star is not None:
        found = privacy.budget_search(cfg.eps_star, cfg.delta_star, params)
        if found is None:
            report.append(("budget_search", "infeasible"))
        else:
            report.append(("budget_search_rho", found[0]))
            report.append(("budget_search_s", found[1]))
    write_keyvalues(path, report)
    print(f"wrote {path}")
    return 0


def cmd_plan(cfg: ExperimentConfig, outdir: Path) -> int:
    require(cfg, "target_eps")
    spec, _, _ = build_model(cfg)
    consts = model_constants(cfg, spec)
    run_scheme = _scheme(cfg.scheme, cfg.s_devices)
    pairs = [("kappa", consts.kappa)]
    k_star = theory.optimal_local_steps(consts.kappa)
    pairs.append(("k_star", k_star))
    for label, k in (("configured", cfg.k_local), ("k_star", k_star)):
        inputs = theory.bound_inputs(
            consts,
            tau=cfg.tau,
            d=spec.dim,
            K=k,
            rho=cfg.rho,
            N=cfg.n_clients,
            min_pc=float(np.min(spec.data.weights)),
            scheme=run_scheme,
        )
        eta, t_eps, rounds = theory.plan_steps(cfg.target_eps, inputs)
        pairs += [
            (f"{label}_k", k),
            (f"{label}_eta", eta),
            (f"{label}_t_eps", t_eps),
            (f"{label}_rounds", rounds),
        ]
    path = outdir / "plan.txt"
    write_keyvalues(path, pairs)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "bounds": cmd_bounds,
    "privacy": cmd_privacy,
    "plan": cmd_plan,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fald", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("config", help="path to a key=value configuration file")
    parser.add_argument("--outdir", default=None, help="output directory (overrides the config)")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config_file(args.config)
        outdir = Path(args.outdir if args.outdir is not None else cfg.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, outdir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ChainDivergenceError, theory.TheoryError, privacy.PrivacyError,
            model_mod.ModelError, metrics.MetricsError, engine.EngineError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
