"""Command-line entry point: ``lighttune <command> [flags]``.

Every run writes ``manifest.json`` (resolved config, seeds, versions and the
artifact list) plus CSV files into the output directory. Outputs depend only
on (command, config, seed); wall-clock timings go to stderr, never to files.

Exit codes: 0 success, 2 bad flags or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data_io import TELEMETRY_SCHEMA, ConfigError, IdxError, RunConfig, find_mnist, load_config, write_csv
from .env_sim import ConfigError as ScenarioError
from .env_sim import LinkEnvironment
from .experiments import (
    ALGORITHMS,
    SimulationError,
    link_run_config,
    resolve_model,
    run_link,
    scenario_for_run,
    summarize,
)
from .ff_core import BLER_CLASSES, InputError
from .finetune import SAMPLING
from .optim import VARIANTS

log = logging.getLogger("lighttune")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
COMMANDS = ("train-mnist", "compare-loss", "simulate-link", "verify-bounds", "convergence-study", "mac-budget")
SCENARIOS = ("S0", "S1", "S2")
SUMMARY_SCHEMA = ("scenario", "seed", "algorithm", "periods", "mae", "p_fa", "p_md", "mean_throughput_bits",
                  "high_snr_throughput_bits", "trigger_rate", "max_mac_count")
CURVE_SCHEMA = ("window_start", "trigger_rate", "mean_error", "mean_throughput_bits")


class UsageError(Exception):
    pass


def _parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or ``"0-9"`` (inclusive)."""
    seeds = []
    try:
        for part in filter(None, (p.strip() for p in text.split(","))):
            lo, _, hi = part.partition("-")
            seeds.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    return seeds


def _choice_list(choices):
    def parse(text: str) -> list[str]:
        items = [p.strip() for p in text.split(",") if p.strip()]
        bad = [i for i in items if i not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"invalid choice {text!r} (choose from {', '.join(choices)}; comma lists allowed)")
        return items

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lighttune", allow_abbrev=False,
                                     description="Forward-forward BLER prediction, online fine-tuning and link adaptation recipes.")
    parser.add_argument("--version", action="version", version=f"lighttune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="config file, or the name of a packaged config (e.g. s1_high_shift)")
    common.add_argument("--seed", type=_parse_seeds, help="seed, comma list or inclusive range such as 0-9 (default: [run] seed)")
    common.add_argument("--out-dir", default="lighttune-out", help="output directory (LIGHTTUNE_OUT overrides)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes for independent cells")
    link = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    link.add_argument("--scenario", type=_choice_list(SCENARIOS), default=None, help="S0, S1, S2 or a comma list")
    link.add_argument("--algorithm", type=_choice_list(ALGORITHMS), default=None, help=f"{'|'.join(ALGORITHMS)} or a comma list")
    link.add_argument("--variant", choices=VARIANTS, help="fine-tuning optimizer variant")
    link.add_argument("--sampling", choices=SAMPLING, help="negative label sampling")
    helps = {
        "train-mnist": "train the FF MNIST recipe with [mnist] loss",
        "compare-loss": "train the MNIST recipe once per loss and compare test accuracy",
        "simulate-link": "closed-loop link adaptation run with telemetry",
        "verify-bounds": "bound sweeps, finite-difference gradient check and quadratic/softplus gap",
        "convergence-study": "trigger-rate decay of the online fine-tuning loop",
        "mac-budget": "worst-case multiply-accumulates per CSI-RS period",
    }
    for name in COMMANDS:
        parents = [common, link] if name in ("simulate-link", "convergence-study") else [common]
        sub.add_parser(name, parents=parents, help=helps[name], allow_abbrev=False)
    return parser


# ---------------------------------------------------------------------------
# Run context
# ---------------------------------------------------------------------------


def _resolve(args) -> tuple[RunConfig, list[int], Path]:
    cfg = load_config(args.config)
    if getattr(args, "variant", None):
        cfg.finetune = replace(cfg.finetune, variant=args.variant)
    if getattr(args, "sampling", None):
        cfg.finetune = replace(cfg.finetune, sampling=args.sampling)
    seeds = args.seed if args.seed is not None else [cfg.seed]
    cfg.seed = seeds[0]
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out = Path(os.environ.get("LIGHTTUNE_OUT") or args.out_dir)
    return cfg, seeds, out


def _manifest(command: str, cfg: RunConfig, seeds, extra: dict, files: list[str]) -> dict:
    return {
        "command": command,
        "seeds": list(seeds),
        "config": cfg.resolved(),
        **extra,
        "files": sorted(files),
        "versions": {"lighttune": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }


def _write_manifest(out: Path, manifest: dict):
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _map(fn, cells, jobs: int):
    if jobs == 1 or len(cells) == 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


# ---------------------------------------------------------------------------
# simulate-link / convergence-study
# ---------------------------------------------------------------------------


def _window_curve(rows: list[dict], window: int) -> list[dict]:
    out = []
    for s in range(0, len(rows), window):
        chunk = rows[s : s + window]
        errs = [r["error"] for r in chunk if r["error"] is not None]
        out.append({
            "window_start": chunk[0]["period"],
            "trigger_rate": float(np.mean([bool(r["triggered"]) for r in chunk])),
            "mean_error": float(np.mean(errs)) if errs else None,
            "mean_throughput_bits": float(np.mean([r["throughput_bits"] for r in chunk])),
        })
    return out


def _link_cell(cell):
    cfg, scenario, seed, algorithm, periods = cell
    spec = scenario_for_run(scenario, cfg, seed)
    if periods:
        spec = replace(spec, duration=periods)
    model, normalizer = resolve_model(cfg)
    run_cfg = link_run_config(replace(cfg, finetune=replace(cfg.finetune, seed=seed)), algorithm)
    rows = run_link(LinkEnvironment(spec), model, normalizer, run_cfg, BLER_CLASSES)
    start = spec.shift_periods[0] if spec.shift_periods else 0
    return rows, start


def _cell_tag(scenario, seed, algorithm):
    return f"{scenario}_{algorithm}_seed{seed}"


def cmd_simulate_link(args, cfg, seeds, out: Path) -> dict:
    scenarios = args.scenario or ["S1"]
    algorithms = args.algorithm or ["cqi-tune"]
    cells = [(cfg, sc, sd, alg, 0) for sc in scenarios for sd in seeds for alg in algorithms]
    results = _map(_link_cell, cells, args.jobs)
    files, summary = [], []
    for (_, sc, sd, alg, _p), (rows, _start) in zip(cells, results):
        tag = _cell_tag(sc, sd, alg)
        write_csv(rows, TELEMETRY_SCHEMA, out / f"telemetry_{tag}.csv")
        write_csv(_window_curve(rows, 100), CURVE_SCHEMA, out / f"curve_{tag}.csv")
        files += [f"telemetry_{tag}.csv", f"curve_{tag}.csv"]
        summary.append({"scenario": sc, "seed": sd, "algorithm": alg, **summarize(rows, cfg.link.tau_bler)})
        s = summary[-1]
        log.info("%s seed %d %s: MAE %s, mean throughput %.0f bits", sc, sd, alg,
                 "n/a" if s["mae"] is None else f"{s['mae']:.4f}", s["mean_throughput_bits"])
    write_csv(summary, SUMMARY_SCHEMA, out / "summary.csv")
    files.append("summary.csv")
    return {"files": files, "scenarios": scenarios, "algorithms": algorithms}


CONVERGENCE_SCHEMA = ("scenario", "seed", "algorithm", "periods", "start", "first_window_rate", "final_window_rate",
                      "count_half", "count_full", "sublinearity_ratio")
DECAY_CURVE_SCHEMA = ("period", "window_rate", "prefix_rate", "cumulative")


def cmd_convergence_study(args, cfg, seeds, out: Path) -> dict:
    from .verify import decay_monitor

    scenarios = args.scenario or ["S1"]
    algorithms = args.algorithm or ["cqi-tune"]
    cells = []
    for sc in scenarios:
        stationary = not scenario_for_run(sc, cfg).shift_periods
        periods = cfg.convergence.periods or (50_000 if stationary else 20_000)
        cells += [(cfg, sc, sd, alg, periods) for sd in seeds for alg in algorithms]
    results = _map(_link_cell, cells, args.jobs)
    files, summary = [], []
    w = cfg.convergence.window
    for (_, sc, sd, alg, periods), (rows, start) in zip(cells, results):
        rep = decay_monitor([bool(r["triggered"]) for r in rows], window=w, start=start)
        n = rep.cumulative.shape[0]
        curve = [{"period": start + (k + 1) * w - 1, "window_rate": float(rep.window_rates[k]),
                  "prefix_rate": float(rep.prefix_rate[(k + 1) * w - 1]), "cumulative": rep.count((k + 1) * w)}
                 for k in range(n // w)]
        tag = _cell_tag(sc, sd, alg)
        write_csv(curve, DECAY_CURVE_SCHEMA, out / f"decay_{tag}.csv")
        files.append(f"decay_{tag}.csv")
        summary.append({"scenario": sc, "seed": sd, "algorithm": alg, "periods": periods, "start": start,
                        "first_window_rate": rep.first_window, "final_window_rate": rep.final_window,
                        "count_half": rep.count(n // 2), "count_full": rep.count(2 * (n // 2)),
                        "sublinearity_ratio": rep.sublinearity_ratio})
        log.info("%s seed %d %s: window rate %.3f -> %.3f, count(2N)/count(N) %s", sc, sd, alg, rep.first_window,
                 rep.final_window, rep.sublinearity_ratio)
    write_csv(summary, CONVERGENCE_SCHEMA, out / "summary.csv")
    files.append("summary.csv")
    return {"files": files, "scenarios": scenarios, "algorithms": algorithms}


# ---------------------------------------------------------------------------
# verify-bounds / mac-budget
# ---------------------------------------------------------------------------


def cmd_verify_bounds(args, cfg, seeds, out: Path) -> dict:
    from .verify import bound_constants, gradient_check_sweep, lemma_sweep, taylor_gap_sweep

    v = cfg.verify
    dims = v.layer_dims
    seed = seeds[0]
    bc = bound_constants(dims, v.b_z, v.b_theta, v.threshold)
    rows = [{"layer": l + 1, "activation_bound": bc.B_layers[l + 1], "gradient_bound": bc.grad_bounds[l],
             "loss_bound": bc.loss_bound,
             "smoothness": bc.rho[l]} for l in range(len(dims) - 1)]
    write_csv(rows, ("layer", "activation_bound", "gradient_bound", "loss_bound", "smoothness"), out / "constants.csv")
    lemma = lemma_sweep(dims, v.b_z, v.b_theta, v.threshold, n_samples=v.lemma_samples, n_pairs=v.lipschitz_pairs, seed=seed)
    grad = gradient_check_sweep(dims, n_points=v.gradient_points, T=v.threshold, seed=seed)
    tay = taylor_gap_sweep(n_points=v.taylor_points)
    checks = [{"check": k, "max_ratio": lemma.max_ratio[k], "violations": lemma.violations[k], "samples": lemma.samples}
              for k in ("activation", "gradient", "loss", "smoothness")]
    write_csv(checks, ("check", "max_ratio", "violations", "samples"), out / "bounds.csv")
    write_csv([{"points": grad.points, "passed": grad.passed, "flagged": grad.flagged, "passed_unflagged": grad.passed_unflagged,
                "pass_fraction": grad.pass_fraction, "unflagged_pass_fraction": grad.unflagged_pass_fraction,
                "worst_unflagged": grad.worst_unflagged}],
              ("points", "passed", "flagged", "passed_unflagged", "pass_fraction", "unflagged_pass_fraction", "worst_unflagged"),
              out / "gradient_check.csv")
    write_csv([{"x": float(x), "gap_pos": float(a), "gap_neg": float(b)} for x, a, b in zip(tay.x, tay.gap_pos, tay.gap_neg)],
              ("x", "gap_pos", "gap_neg"), out / "taylor_gap.csv")
    write_csv([{"max_gap": tay.max_gap, "fitted_exponent": tay.exponent, "envelope": tay.envelope,
                "envelope_holds": tay.envelope_holds()}], ("max_gap", "fitted_exponent", "envelope", "envelope_holds"),
              out / "taylor_summary.csv")
    worst = max(lemma.max_ratio.values())
    log.info("bound sweep: worst measured/bound %.4f, %d violations", worst, lemma.total_violations)
    log.info("gradient check: %.4f pass (%.4f unflagged)", grad.pass_fraction, grad.unflagged_pass_fraction)
    if lemma.total_violations:
        log.warning("measured values exceeded a bound %d times", lemma.total_violations)
    return {"files": ["constants.csv", "bounds.csv", "gradient_check.csv", "taylor_gap.csv", "taylor_summary.csv"]}


def cmd_mac_budget(args, cfg, seeds, out: Path) -> dict:
    from .verify import MAC_ALGORITHMS, mac_budget

    b = mac_budget(cfg.link.layer_dims, len(BLER_CLASSES))
    predictions = {"bler-predict": 1, "cqi-tune": 1, "ri-cqi-tune": 3}
    rows = []
    for alg in MAC_ALGORITHMS:
        tunes = alg != "bler-predict"
        rows.append({"algorithm": alg, "C": b.C, "Q": b.Q, "N_total": b.N_total, "inference": predictions[alg] * b.C * b.Q,
                     "finetune_forward": 2 * b.Q if tunes else 0, "update": 4 * b.N_total if tunes else 0, "total": b.total(alg)})
        log.info("%s: %d MACs", alg, b.total(alg))
    write_csv(rows, ("algorithm", "C", "Q", "N_total", "inference", "finetune_forward", "update", "total"), out / "mac_budget.csv")
    return {"files": ["mac_budget.csv"]}


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------


def _mnist_data(cfg: RunConfig):
    directory = cfg.mnist.data_dir or os.environ.get("LIGHTTUNE_MNIST_DIR", "")
    if not directory:
        raise ConfigError("no MNIST directory: set [mnist] data_dir or LIGHTTUNE_MNIST_DIR")
    return find_mnist(directory)


def _recipe(cfg: RunConfig, seed: int, loss: Optional[str] = None):
    from .mnist import MnistRecipe

    m = cfg.mnist
    return MnistRecipe(hidden=m.hidden_sizes, epochs=m.epochs, batch_size=m.batch_size, lr=m.lr, threshold=m.threshold,
                       loss=loss or m.loss, seed=seed, train_samples=m.train_samples)


def cmd_train_mnist(args, cfg, seeds, out: Path) -> dict:
    from .mnist import accuracy, train

    train_set, test_set = _mnist_data(cfg)
    recipe = _recipe(cfg, seeds[0])
    curve = []

    def cb(epoch, net):
        a = accuracy(net, test_set.images, test_set.labels)
        curve.append({"epoch": epoch + 1, "test_accuracy": a})
        log.info("epoch %d: test accuracy %.4f", epoch + 1, a)

    train(train_set.images, train_set.labels, recipe, callback=cb)
    final = curve[-1]["test_accuracy"] if curve else None
    write_csv(curve, ("epoch", "test_accuracy"), out / "mnist_curve.csv")
    write_csv([{"loss": recipe.loss, "epochs": recipe.epochs, "train_samples": min(recipe.train_samples, len(train_set.labels)),
                "test_accuracy": final}], ("loss", "epochs", "train_samples", "test_accuracy"), out / "summary.csv")
    return {"files": ["mnist_curve.csv", "summary.csv"]}


def cmd_compare_loss(args, cfg, seeds, out: Path) -> dict:
    from .mnist import compare_losses

    train_set, test_set = _mnist_data(cfg)
    cmp = compare_losses(train_set, test_set, _recipe(cfg, seeds[0]), log=log.info)
    rows = [{"loss": k, "test_accuracy": cmp.accuracy[k]} for k in ("softplus", "quadratic")]
    write_csv(rows, ("loss", "test_accuracy"), out / "compare_loss.csv")
    write_csv([{"gap_pp": cmp.gap_pp}], ("gap_pp",), out / "summary.csv")
    return {"files": ["compare_loss.csv", "summary.csv"]}


HANDLERS = {
    "train-mnist": cmd_train_mnist,
    "compare-loss": cmd_compare_loss,
    "simulate-link": cmd_simulate_link,
    "verify-bounds": cmd_verify_bounds,
    "convergence-study": cmd_convergence_study,
    "mac-budget": cmd_mac_budget,
}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg, seeds, out = _resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        info = HANDLERS[args.command](args, cfg, seeds, out)
    except (ConfigError, ScenarioError, UsageError, InputError) as exc:
        print(f"lighttune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxError, FileNotFoundError) as exc:
        print(f"lighttune: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"lighttune: numerical failure at period {exc.period}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"lighttune: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    files = info.pop("files")
    _write_manifest(out, _manifest(args.command, cfg, seeds, info, files))
    log.info("wrote %d files to %s in %.1f s", len(files) + 1, out, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
