"""``aslora`` command line: train, params, sweep, compare, inspect.

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 I/O error.
Run directories go under ``$ASLORA_RUN_ROOT`` (default ``./runs``) unless
``--out`` is given.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from . import config as C
from . import tensor as T
from .adapters import trainable_param_count
from .errors import CheckpointError, ConfigError, NumericalAbort
from .reporting import CHECKPOINT_DIR, RunWriter, default_run_dir, eval_metric, format_table, run_root
from .rng import derive_seed
from .train import build_trainer

log = logging.getLogger("aslora")

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_IO = 0, 2, 3, 4
SWEEP_SEED_KEY = 17


# -- train --------------------------------------------------------------------

def train_run(cfg: dict, run_dir: str | Path, overwrite: bool = False, until: int | None = None) -> dict:
    """Fresh run into ``run_dir``; returns the summary."""
    writer = RunWriter(run_dir, cfg, overwrite=overwrite)
    trainer = build_trainer(cfg, writer)
    return _finish(cfg, writer, trainer, until)


def resume_run(run_dir: str | Path, until: int | None = None) -> dict:
    """Continue a run from its latest checkpoint."""
    run_dir = Path(run_dir)
    cfg = C.load_config(run_dir / "config.json")
    arrays, meta, manifest = checkpoint.load(run_dir / CHECKPOINT_DIR)
    if manifest["config_hash"] != C.config_hash(cfg):
        raise CheckpointError(f"{run_dir}: checkpoint was written for a different config")
    writer = RunWriter(run_dir, cfg, resume_step=meta["step"])
    trainer = build_trainer(cfg, writer)
    trainer.restore(arrays, meta)
    log.info("resuming %s at step %d", run_dir, trainer.step)
    return _finish(cfg, writer, trainer, until)


def _finish(cfg, writer, trainer, until) -> dict:
    writer.attach(trainer)
    with T.precision(C.float_type(cfg)):
        report = trainer.run(until)
    summary = writer.write_summary(report)
    summary["step"] = trainer.step
    summary["complete"] = trainer.step >= cfg["total_steps"]
    return summary


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        if args.config:
            given = C.load_config(args.config)
            saved = C.load_config(run_dir / "config.json")
            if C.config_hash(given) != C.config_hash(saved):
                raise ConfigError("<file>", f"{args.config} does not match the config of {run_dir}")
        summary = resume_run(run_dir, args.until)
    else:
        if not args.config:
            raise ConfigError("<file>", "a config path is required unless --resume is given")
        cfg = C.load_config(args.config)
        run_dir = Path(args.out) if args.out else default_run_dir(cfg, Path(args.config).stem)
        summary = train_run(cfg, run_dir, overwrite=args.force, until=args.until)
    print(f"run directory: {run_dir}")
    print(f"steps: {summary['step']}{'' if summary['complete'] else ' (partial)'}")
    print(f"adapter params: {summary['adapter_params']:,}")
    print(f"train loss: {summary['initial_train_loss']:.4f} -> {summary['final_train_loss']:.4f}")
    if summary["eval_value"] is not None:
        print(f"eval {summary['eval_metric']}: {summary['eval_value']:.4f}")
    print(f"merges: {summary['merges']}")
    return EXIT_OK


# -- params -------------------------------------------------------------------

def param_rows(cfg: dict) -> list[dict]:
    """Trainable adapter counts for every method at this model shape."""
    acfg = C.adapter_config(cfg)
    L = cfg["num_layers"]
    shares = {n for n, _ in cfg["compare_pairs"]}
    if cfg["mode"] == "fixed_share":
        shares.add(cfg["share_n"])
    methods = [("LoRA", "lora", 1, 0), ("Shared A (N=0)", "shared_a", 1, 0)]
    methods += [(f"Fixed share (n={n})", "fixed_share", n, 0) for n in sorted(shares) if 1 <= n <= L]
    methods.append((f"ASLoRA (N={cfg['merge_budget']})", "aslora", 1, cfg["merge_budget"]))
    lora = trainable_param_count(replace(acfg, mode="lora", share_n=1))
    rows = []
    for label, mode, n, merges in methods:
        m = replace(acfg, mode=mode, share_n=n)
        count = trainable_param_count(m, merges)
        groups = math.ceil(L / n) if mode == "fixed_share" else (L if mode == "lora" else L - merges)
        rows.append({
            "method": label, "mode": m.label, "params": count,
            "per_type": count // len(acfg.adapted_types), "b_groups": groups, "vs_lora": count / lora,
        })
    return rows


def cmd_params(args) -> int:
    if args.preset and args.config:
        raise ConfigError("<args>", "give either a config path or --preset, not both")
    cfg = C.preset(args.preset) if args.preset else (C.load_config(args.config) if args.config else C.preset("desk"))
    rows = param_rows(cfg)
    if args.json:
        print(json.dumps(rows, indent=1))
        return EXIT_OK
    print(f"L={cfg['num_layers']} d={cfg['model_dim']} r={cfg['rank']} types={','.join(cfg['adapted_types'])}")
    print(format_table(
        ["method", "trainable", "per type", "B groups/type", "vs LoRA"],
        [[r["method"], r["params"], r["per_type"], r["b_groups"], f"{r['vs_lora']:.3f}"] for r in rows],
    ))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

def sweep_configs(cfg: dict, budgets: list[int]) -> list[tuple[int, dict]]:
    """One validated aslora config per budget, sorted by budget, each with a derived seed."""
    L = cfg["num_layers"]
    bad = [n for n in budgets if not 0 <= n < L]
    if bad:
        raise ConfigError("budgets", f"every budget must lie in [0, {L - 1}] for num_layers={L}, got {bad}")
    out = []
    for n in sorted(set(budgets)):
        seed = derive_seed(cfg["seed"], SWEEP_SEED_KEY, n)
        out.append((n, C.with_overrides(cfg, mode="aslora", merge_budget=n, seed=seed, task_seed=cfg["task_seed"],
                                        run_name=None)))
    return out


def run_sweep(cfg: dict, budgets: list[int], out_dir: str | Path, overwrite: bool = False) -> list[dict]:
    plans = sweep_configs(cfg, budgets)  # validates everything before the first run
    out_dir = Path(out_dir)
    rows = []
    for n, c in plans:
        log.info("sweep: budget %d", n)
        s = train_run(c, out_dir / f"N{n:02d}", overwrite=overwrite)
        metric, value = eval_metric(c, s["eval"])
        rows.append({"N": n, "seed": c["seed"], "params": s["adapter_params"],
                     "final_train_loss": s["final_train_loss"], f"eval_{metric}": value})
    _write_csv(out_dir / "sweep.csv", rows)
    return rows


def cmd_sweep(args) -> int:
    cfg = C.load_config(args.config)
    out = Path(args.out) if args.out else run_root() / f"sweep-{C.config_hash(cfg)[:8]}"
    rows = run_sweep(cfg, args.budgets, out, overwrite=args.force)
    sys.stdout.write(_csv_text(rows))
    return EXIT_OK


# -- compare ------------------------------------------------------------------

def compare_configs(cfg: dict) -> list[tuple[int, int, dict, dict]]:
    """Validated (n, N, fixed_cfg, adaptive_cfg) per matched pair."""
    L = cfg["num_layers"]
    pairs = cfg["compare_pairs"]
    if not pairs:
        raise ConfigError("compare_pairs", "no pairs to compare")
    out = []
    for n, N in pairs:
        if not 1 <= n <= L or not 0 <= N < L:
            raise ConfigError("compare_pairs", f"pair [{n}, {N}] is out of range for num_layers={L}")
        if math.ceil(L / n) != L - N:
            raise ConfigError(
                "compare_pairs",
                f"unmatched pair [{n}, {N}]: fixed_share({n}) keeps {math.ceil(L / n)} groups, aslora({N}) keeps {L - N}",
            )
        common = {"total_steps": cfg["compare_steps"], "compare_steps": cfg["compare_steps"], "run_name": None}
        fixed = C.with_overrides(cfg, mode="fixed_share", share_n=n, **common)
        adaptive = C.with_overrides(cfg, mode="aslora", share_n=1, merge_budget=N, **common)
        out.append((n, N, fixed, adaptive))
    return out


def run_compare(cfg: dict, out_dir: str | Path, overwrite: bool = False) -> list[dict]:
    plans = compare_configs(cfg)
    out_dir = Path(out_dir)
    rows = []
    for i, (n, N, fixed, adaptive) in enumerate(plans):
        pair = []
        for method, c, setting in (("fixed", fixed, f"n={n}"), ("adaptive", adaptive, f"N={N}")):
            log.info("compare: pair %d %s %s", i, method, setting)
            s = train_run(c, out_dir / f"pair{i}-{method}", overwrite=overwrite)
            metric, value = eval_metric(c, s["eval"])
            pair.append({
                "pair": i, "method": method, "setting": setting, "params": s["adapter_params"],
                "b_groups": cfg["num_layers"] - N, "final_train_loss": s["final_train_loss"],
                "metric": metric, "eval": value,
            })
        if pair[0]["params"] != pair[1]["params"]:
            raise AssertionError(f"pair {i}: parameter counts differ ({pair[0]['params']} vs {pair[1]['params']})")
        rows.extend(pair)
    _write_csv(out_dir / "compare.csv", rows)
    return rows


def cmd_compare(args) -> int:
    cfg = C.load_config(args.config)
    if args.steps is not None:
        cfg = C.with_overrides(cfg, compare_steps=args.steps)
    out = Path(args.out) if args.out else run_root() / f"compare-{C.config_hash(cfg)[:8]}"
    rows = run_compare(cfg, out, overwrite=args.force)
    print(format_table(
        ["pair", "method", "setting", "params", "B groups/type", "final train loss", rows[0]["metric"]],
        [[r["pair"], r["method"], r["setting"], r["params"], r["b_groups"], r["final_train_loss"], r["eval"]]
         for r in rows],
    ))
    higher_better = rows[0]["metric"] == "accuracy"
    for fixed, adaptive in zip(rows[::2], rows[1::2]):
        a, f = adaptive["eval"], fixed["eval"]
        if a is None or f is None:
            continue
        wins = a >= f if higher_better else a <= f
        print(f"pair {fixed['pair']} ({fixed['setting']} vs {adaptive['setting']}): "
              f"adaptive {'>=' if wins else '<'} fixed")
    print(f"written to {out / 'compare.csv'}")
    return EXIT_OK


# -- inspect ------------------------------------------------------------------

def cmd_inspect(args) -> int:
    path = Path(args.path)
    if (path / CHECKPOINT_DIR).is_dir():
        path = path / CHECKPOINT_DIR
    manifest = checkpoint.read_manifest(path)
    if args.json:
        print(json.dumps(manifest, indent=1))
        return EXIT_OK
    state = manifest["state"]
    print(f"checkpoint: {path}")
    print(f"format: {manifest['format']}")
    print(f"step: {manifest['step']}")
    print(f"config hash: {manifest['config_hash']}")
    print(f"rng: {manifest['rng']['bit_generator']}")
    print(f"payload: {manifest['payload_bytes']:,} bytes, sha256 {manifest['payload_sha256'][:16]}...")
    for proj, bank in sorted(state.get("banks", {}).items()):
        groups = "; ".join(",".join(map(str, m)) for m in bank["groups"].values())
        print(f"{proj}: {len(bank['groups'])} groups after {bank['merges_done']} merges [{groups}]")
    print(format_table(
        ["tensor", "shape", "dtype", "offset", "bytes"],
        [[e["name"], "x".join(map(str, e["shape"])) or "scalar", e["dtype"], e["offset"], e["nbytes"]]
         for e in manifest["tensors"]],
    ))
    return EXIT_OK


# -- plumbing -----------------------------------------------------------------

def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(rows))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aslora", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("config", nargs="?", help="JSON config (optional with --resume)")
    p.add_argument("--out", help="run directory (default: $ASLORA_RUN_ROOT/<name>)")
    p.add_argument("--resume", metavar="RUN_DIR", help="continue from RUN_DIR's checkpoint")
    p.add_argument("--until", type=int, help="stop after this step and checkpoint")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("params", help="trainable parameter counts per method")
    p.add_argument("config", nargs="?")
    p.add_argument("--preset", choices=sorted(C.PRESETS))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("sweep", help="one aslora run per merge budget")
    p.add_argument("config")
    p.add_argument("--budgets", type=int, nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="fixed vs adaptive sharing at matched parameter counts")
    p.add_argument("config")
    p.add_argument("--steps", type=int, help="override compare_steps")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("path", help="checkpoint or run directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
