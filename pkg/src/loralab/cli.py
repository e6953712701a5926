"""Command-line experiment driver.

Every command reads one JSON config (``--config``; omitted means ``{}``)
and writes under ``<out>/<name>/<command>/``.  Per-seed artifacts go to a
``<seed>/`` subdirectory.  Reports are deterministic; wall-clock timings
go to a separate ``metadata.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import signal
import sys
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .attacks import Evaluation, near_perfect_substitute, run_attack
from .config import ExperimentConfig, config_from_dict, load_config
from .defense import (DualLoraResult, asr_drops, defender_accuracy, evaluate_tradeoff, train_dual_lora,
                      undefended_reference)
from .errors import ContractViolation
from .metrics import accuracy, asr, dataset_frechet, divergence_profile
from .nnet import load_checkpoint, save_checkpoint
from .rng import stream
from .service import parse_address, serve
from .victim import VictimOracle, train_victim, victim_datasets
from .worldgen import balanced_counts, sample_ood, synth_candidates

ATTACK_COLUMNS = ("attack", "mode", "seed", "budget", "queries_used", "acc", "asr")


# -- helpers --------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})
    return path


def _config_record(cfg: ExperimentConfig) -> dict:
    """The experiment content; output location and worker count live in metadata.json."""
    rec = cfg.to_dict()
    rec["world"] = cfg.world.to_dict()
    for key in ("out", "parallel"):
        rec.pop(key)
    return rec


def _command_dir(cfg: ExperimentConfig, command: str) -> Path:
    return Path(cfg.out) / cfg.name / command


def _victim(cfg: ExperimentConfig):
    """Load the configured checkpoint or train the victim in-process."""
    _, test = victim_datasets(cfg.world, cfg.victim)
    if cfg.victim_checkpoint:
        path = Path(cfg.victim_checkpoint)
        if not path.exists():
            raise ContractViolation(f"victim checkpoint not found: {path}")
        models, _ = load_checkpoint(path)
        model = models.get("victim") or next(iter(models.values()))
        return model, accuracy(model, test.x, test.y), test
    model, acc = train_victim(cfg.world, cfg.victim, cfg.train)
    return model, acc, test


def _write_metadata(cfg: ExperimentConfig, directory: Path, started: float, extra: dict | None = None) -> None:
    meta = {"wall_clock_seconds": round(time.perf_counter() - started, 3), "backend": kernels.BACKEND,
            "version": __version__, "finished_unix": int(time.time())}
    meta.update({"out": cfg.out, "parallel": cfg.parallel})
    meta.update(extra or {})
    _write(directory / "metadata.json", _dumps(meta))


# -- train-victim ---------------------------------------------------------------

def cmd_train_victim(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    model, acc = train_victim(cfg.world, cfg.victim, cfg.train)
    out = _command_dir(cfg, "train-victim")
    save_checkpoint(out / "victim.json", {"victim": model},
                    {"world": cfg.world.to_dict(), "victim": cfg.victim.to_dict()})
    _write(out / "summary.json", _dumps({"victim_acc": acc, "config": _config_record(cfg)}))
    _write_metadata(cfg, out, started)
    print(f"victim test accuracy: {acc:.4f}%")
    print(f"checkpoint: {out / 'victim.json'}")
    return 0


# -- attack -----------------------------------------------------------------------

def _attack_cell(cfg: ExperimentConfig, name: str, seed: int, budget: int):
    victim, victim_acc, test = _victim(cfg)
    acfg = cfg.attack_config(budget, seed)
    oracle = VictimOracle(victim, budget, cfg.label_mode)
    sub, report = run_attack(name, oracle, cfg.world, cfg.generator, acfg, Evaluation(test.x, test.y, victim_acc))
    ood = sample_ood(cfg.world, len(test), stream(seed, "report-ood"))
    profile = divergence_profile(victim, sub, test.x, ood)
    return report, profile.summary()


def _generator_fidelity(cfg: ExperimentConfig) -> float:
    _, test = victim_datasets(cfg.world, cfg.victim)
    rng = stream(cfg.generator.variation_seed, "fidelity")
    synth = synth_candidates(cfg.world, cfg.generator, balanced_counts(cfg.world.num_classes, len(test)), rng)
    return dataset_frechet(synth.x, test.x)


def cmd_attack(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    cells = [(name, seed, budget) for seed in cfg.seeds for name in cfg.attacks for budget in cfg.budgets]
    for _, seed, budget in cells:  # every budget is checked before any query is spent
        cfg.attack_config(budget, seed)
    _, victim_acc, _ = _victim(cfg)
    if cfg.parallel > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel) as pool:
            futures = [pool.submit(_attack_cell, cfg, *cell) for cell in cells]
            results = [f.result() for f in futures]
    else:
        results = [_attack_cell(cfg, *cell) for cell in cells]

    out = _command_dir(cfg, "attack")
    fidelity = _generator_fidelity(cfg)
    rows = []
    for (name, seed, budget), (report, divergence) in zip(cells, results):
        stem = out / str(seed) / f"{name}-{report.label_mode}-{report.backbone_mode}-{budget}"
        doc = report.to_dict()
        doc.update({"divergence": divergence, "generator_frechet": fidelity})
        _write(stem.with_suffix(".json"), _dumps(doc))
        _write(stem.with_suffix(".events.jsonl"), report.event_lines())
        _write_csv(stem.with_suffix(".csv"), ATTACK_COLUMNS, report.csv_rows())
        rows.append(report.final_row())
    _write_csv(out / "results.csv", ATTACK_COLUMNS, rows)
    _write(out / "summary.json", _dumps({"victim_acc": victim_acc, "label_mode": cfg.label_mode,
                                         "generator_frechet": fidelity, "config": _config_record(cfg)}))
    _write_metadata(cfg, out, started, {"cells": len(cells)})
    for name in cfg.attacks:
        for budget in cfg.budgets:
            finals = [r.final_asr for (n, _, b), (r, _) in zip(cells, results) if n == name and b == budget]
            print(f"{name:8s} budget={budget:<6d} median ASR {np.median(finals):7.2f}")
    print(f"results: {out / 'results.csv'}")
    return 0


# -- defend -----------------------------------------------------------------------

def cmd_defend(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    d = cfg.defense
    attack_cfg = cfg.attack.replace(train=cfg.train)
    for seed in cfg.seeds:
        cfg.attack_config(d.budget, seed)
    base = dict(world=cfg.world, attacks=d.attacks, budget=d.budget, seeds=cfg.seeds, gen_cfg=cfg.generator,
                attack_cfg=attack_cfg, data_cfg=cfg.victim, label_mode=cfg.label_mode)
    table = evaluate_tradeoff(lambdas=d.lambdas, defense_cfg=cfg.defense_config(0.0), **base)
    reference = undefended_reference(train_cfg=cfg.train, **base)
    out = _command_dir(cfg, "defend")
    table.write_csv(out / "tradeoff.csv")
    reference.write_csv(out / "reference.csv")
    for row, report in zip(table.rows, table.reports):
        stem = out / str(row["seed"]) / f"lambda-{row['lambda']!r}-{row['attack']}"
        _write(stem.with_suffix(".json"), _dumps(report.to_dict()))
    pairs = {repr(lam): info for lam, info in table.pairs.items()}
    drops = {repr(float(lam)): {a: float(np.median(asr_drops(table, reference, float(lam), a))) for a in d.attacks}
             for lam in d.lambdas}
    _write(out / "summary.json", _dumps({"pairs": pairs, "median_asr_drop": drops, "config": _config_record(cfg)}))
    _write_metadata(cfg, out, started)
    for lam, per_attack in drops.items():
        print(f"lambda={lam:<5s} " + "  ".join(f"{a} drop {v:7.2f}" for a, v in per_attack.items()))
    print(f"trade-off table: {out / 'tradeoff.csv'}")
    return 0


# -- distinction ------------------------------------------------------------------

def cmd_distinction(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    victim, _, test = _victim(cfg)
    train, _ = victim_datasets(cfg.world, cfg.victim)
    out = _command_dir(cfg, "distinction")
    summary = {}
    for seed in cfg.seeds:
        sub = near_perfect_substitute(victim, train.x, cfg.attack_config(cfg.budgets[0], seed))
        ood = sample_ood(cfg.world, cfg.distinction.ood_samples, stream(seed, "distinction-ood"))
        profile = divergence_profile(victim, sub, test.x, ood)
        control = divergence_profile(victim, victim, test.x, ood)
        profile.write_csv(out / str(seed) / "divergence.csv")
        control.write_csv(out / str(seed) / "control.csv")
        summary[str(seed)] = {"substitute": profile.summary(), "control": control.summary()}
        print(f"seed {seed}: ID mean {profile.id_mean:.4f}  OOD mean {profile.ood_mean:.4f}")
    _write(out / "summary.json", _dumps({"profiles": summary, "config": _config_record(cfg)}))
    _write_metadata(cfg, out, started)
    return 0


# -- serve --------------------------------------------------------------------------

def cmd_serve(cfg: ExperimentConfig, address: str | None = None, ready=None, stop: threading.Event | None = None) -> int:
    if cfg.serve.defense_lambda is None:
        victim, acc, _ = _victim(cfg)
        oracle = VictimOracle(victim, cfg.serve.budget, cfg.label_mode)
    else:
        pair: DualLoraResult = train_dual_lora(cfg.world, cfg.defense_config(cfg.serve.defense_lambda), cfg.victim)
        acc = defender_accuracy(pair)
        oracle = pair.oracle(cfg.serve.budget, cfg.label_mode)
    handle = serve(oracle, parse_address(address or cfg.serve.address))
    host, port = handle.address
    print(f"serving on {host}:{port} (label mode {cfg.label_mode}, budget {cfg.serve.budget}, "
          f"accuracy {acc:.4f}%)", flush=True)
    stop = stop or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    if ready is not None:
        ready(handle)
    stop.wait()
    handle.close()
    print(f"stopped; {oracle.answered} queries answered, {oracle.remaining} remaining", flush=True)
    return 0


# -- report -------------------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: ExperimentConfig) -> int:
    base = Path(cfg.out) / cfg.name
    out = base / "report"
    found = False
    results = base / "attack" / "results.csv"
    if results.exists():
        found = True
        victim_acc = json.loads((base / "attack" / "summary.json").read_text())["victim_acc"]
        finals: dict[tuple, dict[str, float]] = {}
        for row in _read_csv(results):
            key = (row["attack"], row["mode"], int(row["budget"]))
            finals.setdefault(key, {})[row["seed"]] = float(row["asr"])
            if abs(asr(float(row["acc"]), victim_acc) - float(row["asr"])) > 0.01:
                raise ContractViolation(f"inconsistent asr in {results}: {row}")
        rows = [{"attack": a, "mode": m, "budget": b, "seeds": len(v),
                 "median_final_asr": float(np.median(list(v.values())))} for (a, m, b), v in sorted(finals.items())]
        _write_csv(out / "attack_summary.csv", ("attack", "mode", "budget", "seeds", "median_final_asr"), rows)
        for r in rows:
            print(f"{r['attack']:8s} {r['mode']:9s} budget={r['budget']:<6d} median final ASR {r['median_final_asr']:7.2f}")
    tradeoff = base / "defend" / "tradeoff.csv"
    if tradeoff.exists():
        found = True
        summary = json.loads((base / "defend" / "summary.json").read_text())
        rows = [{"lambda": lam, "attack": a, "median_asr_drop": v}
                for lam, per in summary["median_asr_drop"].items() for a, v in per.items()]
        _write_csv(out / "defense_summary.csv", ("lambda", "attack", "median_asr_drop"), rows)
        for r in rows:
            print(f"lambda={r['lambda']:<5s} {r['attack']:8s} median ASR drop {r['median_asr_drop']:7.2f}")
    if not found:
        raise ContractViolation(f"nothing to report under {base}; run 'attack' or 'defend' first")
    return 0


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loralab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("train-victim", "train the victim and save a checkpoint"),
                            ("attack", "run extraction attacks and write reports"),
                            ("defend", "sweep the dual-adapter defense"),
                            ("distinction", "ID vs OOD divergence of a near-perfect substitute"),
                            ("serve", "expose the victim over the wire protocol"),
                            ("report", "summarise earlier attack/defend outputs")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON experiment config (default: built-in defaults)")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
        p.add_argument("--budget", type=int, help="query budget (replaces the configured budget list)")
        p.add_argument("--label-mode", choices=("soft", "hard"))
        p.add_argument("--backbone", choices=("identical", "cross"))
        p.add_argument("--parallel", type=int, metavar="N", help="worker processes for independent cells")
        if name == "serve":
            p.add_argument("--address", help="host:port to bind (default from config)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else config_from_dict({})
    changes = {}
    if args.out is not None:
        changes["out"] = args.out
    if args.seeds is not None:
        try:
            changes["seeds"] = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            raise ContractViolation(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if args.budget is not None:
        changes["budgets"] = (args.budget,)
        changes["defense"] = dataclasses.replace(cfg.defense, budget=args.budget)
        changes["serve"] = dataclasses.replace(cfg.serve, budget=args.budget)
    if args.label_mode is not None:
        changes["label_mode"] = args.label_mode
    if args.backbone is not None:
        changes["attack"] = cfg.attack.replace(backbone_mode=args.backbone)
    if args.parallel is not None:
        changes["parallel"] = args.parallel
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train-victim":
            return cmd_train_victim(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "defend":
            return cmd_defend(cfg)
        if args.command == "distinction":
            return cmd_distinction(cfg)
        if args.command == "serve":
            return cmd_serve(cfg, args.address)
        return cmd_report(cfg)
    except ContractViolation as exc:
        print(f"loralab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"loralab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
