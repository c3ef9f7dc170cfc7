"""Command-line entry point: ``fedbound {run,sweep,gradcheck,dump-data}``.

Exit codes: 0 success, 1 runtime failure (or a failed gradient check),
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import DEFENSES, ConfigValidationError, ExperimentConfig, from_dict, load_config
from .data import dump_dataset
from .engine import run_experiment, setup
from .gradcheck import run_gradcheck

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

log = logging.getLogger("fedbound")


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _config_error(exc: ConfigValidationError) -> int:
    for problem in exc.problems:
        print(f"config error: {problem}", file=sys.stderr)
    return EXIT_CONFIG


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigValidationError as exc:
        return _config_error(exc)
    run_dir = Path(args.out) / cfg.config_hash()
    try:
        result = run_experiment(cfg, run_dir, parallel=args.parallel)
    except Exception as exc:  # noqa: BLE001 - report and map to exit 1
        log.error("run failed: %s", exc)
        print(f"run failed: {exc}; partial reports kept in {run_dir}", file=sys.stderr)
        return EXIT_FAILURE
    s = result.summary
    print(f"{'run':<18} {'attack':<8} {'defense':<8} {'ACC':>7} {'ASR':>7}")
    print(f"{s['config_hash']:<18} {s['attack']:<8} {s['defense']:<8} {_fmt(s['final_acc']):>7} {_fmt(s['final_asr']):>7}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _sweep_one(job):
    cfg_dict, out = job
    cfg = from_dict(cfg_dict)
    run_dir = Path(out) / cfg.config_hash()
    return run_experiment(cfg, run_dir).summary


def cmd_sweep(args) -> int:
    defenses = [d.strip() for d in args.defenses.split(",") if d.strip()]
    unknown = [d for d in defenses if d not in DEFENSES]
    if unknown or not defenses:
        print(f"unknown defense(s) {unknown}; choose from {list(DEFENSES)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        base = _load(args)
    except ConfigValidationError as exc:
        return _config_error(exc)
    runs = list(defenses) if "none" in defenses else ["none"] + defenses
    jobs = [(base.replace(defense={"kind": d}).to_dict(), args.out) for d in runs]
    try:
        if args.parallel > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                summaries = list(pool.map(_sweep_one, jobs))
        else:
            summaries = [_sweep_one(job) for job in jobs]
    except Exception as exc:  # noqa: BLE001
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    by_defense = dict(zip(runs, summaries))
    vanilla_acc = by_defense["none"]["final_acc"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in defenses:
        s = by_defense[d]
        rows.append({
            "defense": d,
            "ACC": s["final_acc"],
            "ACC_drop_vs_vanilla": vanilla_acc - s["final_acc"],
            "ASR": "" if s["final_asr"] is None else s["final_asr"],
        })
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["defense", "ACC", "ACC_drop_vs_vanilla", "ASR"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"{'defense':<10} {'ACC':>7} {'ACC_drop':>9} {'ASR':>7}")
    for r in rows:
        asr = None if r["ASR"] == "" else r["ASR"]
        print(f"{r['defense']:<10} {_fmt(r['ACC']):>7} {_fmt(r['ACC_drop_vs_vanilla']):>9} {_fmt(asr):>7}")
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    res = run_gradcheck(seed=seed, n_models=args.models, tol=args.tol, corrupt=args.corrupt)
    print(f"checked {res['checked']} coordinates, skipped {res['skipped']} near kinks")
    print(f"max relative error {res['max_rel_err']:.3e} at {res['worst']}")
    if res["passed"]:
        print("gradcheck: PASS")
        return EXIT_OK
    print(f"gradcheck: FAIL ({len(res['failures'])} coordinates above {args.tol:g})", file=sys.stderr)
    for case, name, (coord, analytic, numeric, err) in res["failures"][: args.show]:
        print(f"  model {case} {name} {coord}: analytic {analytic:.6e} numeric {numeric:.6e} rel {err:.2e}", file=sys.stderr)
    return EXIT_FAILURE


def cmd_dump_data(args) -> int:
    try:
        cfg = _load(args)
    except ConfigValidationError as exc:
        return _config_error(exc)
    scenario = setup(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    common = {"seed": cfg.seed, "config_hash": cfg.config_hash()}
    syn = scenario.server.syn
    dump_dataset(out / "synthetic.fbds", syn, {
        **common,
        "brightness": d.syn_brightness,
        "noise": d.syn_noise,
        "poisoned_indices": [int(i) for i in scenario.syn_poisoned_idx],
    })
    for c in scenario.clients:
        dump_dataset(out / f"client{c.client_id}_train.fbds", c.train, {
            **common, "client_id": c.client_id, "noise": d.noise, "compromised": c.compromised,
        })
        dump_dataset(out / f"client{c.client_id}_test.fbds", c.test, {**common, "client_id": c.client_id, "noise": d.noise})
    if scenario.asr_test is not None:
        dump_dataset(out / "asr_test.fbds", scenario.asr_test, {**common, "trigger": cfg.attack.trigger})
    print(f"wrote {len(scenario.clients) * 2 + 1 + (scenario.asr_test is not None)} datasets to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbound", description="Backdoor defense experiments for synthetic-data federated learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("run", help="run one experiment")
    common(p, "runs")
    p.add_argument("--parallel", type=int, default=1, help="threads for client training")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="compare defenses on one scenario")
    common(p, "sweep")
    p.add_argument("--defenses", default=",".join(DEFENSES), help="comma-separated defense names")
    p.add_argument("--parallel", type=int, default=1, help="experiments to run concurrently")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--corrupt", action="store_true", help="perturb the analytic gradients (negative control)")
    p.add_argument("--show", type=int, default=20, help="failing coordinates to print")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-data", help="write the scenario's datasets in binary form")
    common(p, "data")
    p.set_defaults(func=cmd_dump_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
