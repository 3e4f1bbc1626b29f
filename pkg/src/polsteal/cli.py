"""Command-line front door: ``polsteal build-victim | attack | analyze``."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import logging
import sys
from pathlib import Path

from .analysis import (
    CorrelationConfig,
    correlation_experiment,
    robustness_sweep,
    write_correlation_csv,
    write_summary,
    write_sweep_csv,
)
from .attack import StealthyImitation, random_baseline, reference_fit_steal
from .config import ExperimentConfig, load_config, stream_seed, write_manifest
from .envs import make_env
from .errors import ConfigError
from .nn import TrainConfig
from .victim import load_bundle, make_oracle, save_bundle, score_policy, train_victim

log = logging.getLogger("polsteal")

BASELINES = {"none": None, "random1": 1.0, "random10": 10.0, "random100": 100.0, "reffit": "reffit"}


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _victim_files(directory):
    d = Path(directory)
    return [d / "victim_model.json", d / "reference.txt", d / "env.json", d / "returns.json"]


def build_victim(cfg: ExperimentConfig) -> Path:
    started = _now()
    env = make_env(cfg.env_name, **cfg.env_overrides())
    v = cfg.victim
    tcfg = TrainConfig(learning_rate=v.learning_rate, batch_size=v.batch_size, epochs=v.epochs)
    bundle = train_victim(
        env,
        v.trajectories,
        tcfg,
        seed=stream_seed(cfg.seed, "victim"),
        hidden=v.hidden,
        target_loss=v.target_loss,
        eval_seed=stream_seed(cfg.seed, "eval"),
    )
    out = cfg.victim_dir()
    paths = save_bundle(bundle, out)
    write_manifest(out, cfg, "build-victim", started, _now(), paths)
    print(
        f"victim {cfg.env_name}: return {bundle.victim_return:.4f} "
        f"(expert {bundle.expert_return:.4f}, floor {env.r_min:.4f}) -> {out}"
    )
    return out


def _attack_label(baseline, defense):
    return (baseline if baseline != "none" else "si") + ("_defense" if defense else "")


def run_attack(cfg: ExperimentConfig, defense=None, baseline="none") -> Path:
    if baseline not in BASELINES:
        raise ConfigError(f"unknown baseline {baseline!r}")
    defense = cfg.defense.enabled if defense is None else defense
    started = _now()
    vdir = cfg.victim_dir()
    bundle = load_bundle(vdir)
    acfg = cfg.attack_config(bundle.ref)
    oracle = make_oracle(bundle, acfg.total_budget, acfg.reserved_budget, defense, stream_seed(cfg.seed, "defense"))
    kind = BASELINES[baseline]
    if kind is None:
        run = StealthyImitation(oracle, bundle.ref, acfg)
        report, model = run.run()
    elif kind == "reffit":
        oracle = make_oracle(bundle, acfg.total_budget, 0, defense, stream_seed(cfg.seed, "defense"))
        report, model = reference_fit_steal(oracle, bundle.ref, acfg, acfg.family)
    else:
        oracle = make_oracle(bundle, acfg.total_budget, 0, defense, stream_seed(cfg.seed, "defense"))
        report, model = random_baseline(oracle, kind, acfg, bundle.ref)
    report.label = _attack_label(baseline, defense)
    ra, rv, rr = score_policy(bundle, model, stream_seed(cfg.seed, "eval"), cfg.attack.eval_episodes)
    report.attacker_return, report.victim_return, report.return_ratio = ra, rv, rr
    report.r_min = bundle.env.r_min
    out = cfg.output_path() / "attack" / report.label
    paths = report.write(out)
    write_manifest(out, cfg, f"attack --defense {'on' if defense else 'off'} --baseline {baseline}", started, _now(), paths, _victim_files(vdir))
    line = f"{report.label}: rr {rr:.4f} consumed {report.consumed}/{report.total_budget}"
    if report.iterations:
        line += f" selected KL {report.selected_kl:.4f} dKL {report.delta_kl:+.2f}%"
    print(line)
    return out


def run_analysis(cfg: ExperimentConfig, experiment) -> Path:
    started = _now()
    vdir = cfg.victim_dir()
    bundle = load_bundle(vdir)
    a = cfg.analysis
    seed = stream_seed(cfg.seed, "analysis")
    out = cfg.output_path() / "analysis" / experiment
    out.mkdir(parents=True, exist_ok=True)
    if experiment == "correlation":
        cc = CorrelationConfig(
            count=a.count,
            points_per_dist=a.points_per_dist,
            z_max=a.z_max,
            hidden=a.hidden,
            batch_size=a.batch_size,
            learning_rate=a.learning_rate,
        )
        result = correlation_experiment(bundle, cc, seed)
        paths = {"csv": str(out / "correlation.csv"), "summary": str(out / "summary.json")}
        write_correlation_csv(result, paths["csv"])
        write_summary(result.summary(), paths["summary"])
        print(f"correlation: rho {result.rho:.4f} p {result.p_value:.3g} count {len(result.records)}")
    elif experiment == "sweep":
        acfg = cfg.attack_config(bundle.ref)
        points = robustness_sweep(bundle, a.lambdas, a.zs, a.queries_per_point, acfg, seed, stream_seed(cfg.seed, "eval"))
        paths = {"csv": str(out / "sweep.csv"), "summary": str(out / "summary.json")}
        write_sweep_csv(points, paths["csv"])
        summary = {
            "experiment": "sweep",
            "mode": "analytical",
            "seed": seed,
            "points": [dataclasses.asdict(p) for p in points],
            "queries_per_point": a.queries_per_point,
        }
        write_summary(summary, paths["summary"])
        print("sweep: " + ", ".join(f"{p.kind}={p.value:g} rr {p.rr:.4f}" for p in points))
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    write_manifest(out, cfg, f"analyze --experiment {experiment}", started, _now(), paths, _victim_files(vdir))
    return out


def parse_seeds(text):
    """``"3"`` -> [3]; ``"0..4"`` -> [0, 1, 2, 3, 4]."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _parser():
    p = argparse.ArgumentParser(prog="polsteal", description="Policy stealing experiments on toy control tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="key = value experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seeds", help="run seeds a..b, each in its own seed<k>/ subdirectory")

    common(sub.add_parser("build-victim", help="train and measure a victim policy"))
    at = sub.add_parser("attack", help="steal a victim policy")
    common(at)
    at.add_argument("--defense", choices=["on", "off"], default=None)
    at.add_argument("--baseline", choices=list(BASELINES), default="none")
    an = sub.add_parser("analyze", help="run an analysis experiment")
    common(an)
    an.add_argument("--experiment", required=True, choices=["correlation", "sweep"])
    return p


def _configs(args):
    cfg = load_config(args.config, args.set)
    if not args.seeds:
        return [cfg]
    out = []
    for s in parse_seeds(args.seeds):
        root = cfg.output_path() / f"seed{s}"
        victim_dir = str(Path(cfg.victim.dir) / f"seed{s}") if cfg.victim.dir else ""
        out.append(
            dataclasses.replace(
                cfg, seed=s, output_dir=str(root), victim=dataclasses.replace(cfg.victim, dir=victim_dir)
            )
        )
    return out


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        configs = _configs(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"polsteal: {exc}", file=sys.stderr)
        return 1
    try:
        for cfg in configs:
            if args.command == "build-victim":
                build_victim(cfg)
            elif args.command == "attack":
                defense = None if args.defense is None else args.defense == "on"
                run_attack(cfg, defense, args.baseline)
            else:
                run_analysis(cfg, args.experiment)
    except Exception as exc:  # surfaced as a runtime failure with exit code 2
        log.debug("failure", exc_info=True)
        print(f"polsteal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
