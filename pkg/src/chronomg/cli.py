"""Command-line runner.

Examples::

    chronomg --preset table2 --desk --out results/table2
    chronomg --config run.ini --workers 4
    chronomg --config run.ini --scaling 1,2,4,8
    chronomg --manifest results/table2/manifest.json

Exit status for a single run: 0 converged, 2 stalled, 3 diverged; 1 for
usage or configuration errors.  Presets and scaling runs exit 0 once all their
runs have finished, whatever the individual outcomes (the tables record them).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import kernels
from .config import ConfigError, RunConfig, emit_config, load_config, parse_config
from .presets import PRESETS, Context, run_preset
from .runner import USAGE_ERROR, default_workers, run, scaling_harness, write_manifest, write_rows

log = logging.getLogger("chronomg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chronomg", description="Multigrid reduction in time for chaotic problems.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", metavar="NAME", help="run a named experiment preset")
    src.add_argument("--config", metavar="FILE", help="run the configuration in FILE")
    src.add_argument("--manifest", metavar="FILE", help="rerun the run recorded in a manifest")
    src.add_argument("--list", action="store_true", help="list the presets and exit")
    p.add_argument("--desk", action="store_true", help="reduced-size variant of a preset")
    p.add_argument("--workers", type=int, metavar="N",
                   help="worker threads (default: CHRONOMG_WORKERS or 1)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--tol", type=float, metavar="X", help="absolute residual tolerance")
    p.add_argument("--max-iter", type=int, metavar="N", help="iteration limit")
    p.add_argument("--seed", type=int, metavar="N", help="seed for random LV bases")
    p.add_argument("--scaling", metavar="LIST",
                   help="with --config: time the run for these worker counts, e.g. 1,2,4,8")
    p.add_argument("--weak", action="store_true",
                   help="with --scaling: grow n_t with the worker count")
    p.add_argument("--backend", choices=("compiled", "python"), help="kernel backend")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    out = {}
    if args.tol is not None:
        out["tol"] = args.tol
    if args.max_iter is not None:
        out["max_iter"] = args.max_iter
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _worker_list(raw: str) -> list[int]:
    try:
        ws = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--scaling expects comma-separated integers, got {raw!r}") from None
    if not ws or min(ws) < 1:
        raise UsageError("--scaling needs positive worker counts")
    return ws


def _run_preset(name, desk, workers, overrides, out, worker_list=None) -> int:
    ctx = Context(out=Path(out), desk=desk, workers=workers, overrides=overrides)
    if worker_list:
        ctx.worker_list = list(worker_list)
    entries = run_preset(name, ctx)
    write_manifest(ctx.out / "manifest.json", **entries)
    print(f"{name}: wrote {len(ctx.files)} files to {ctx.out}")
    return 0


def _run_config(cfg: RunConfig, args, workers: int) -> int:
    out = Path(args.out or cfg.out or f"chronomg-{cfg.name}")
    if args.scaling:
        rows = scaling_harness(cfg.replace(workers=workers), _worker_list(args.scaling),
                               "weak" if args.weak else "strong")
        out.mkdir(parents=True, exist_ok=True)
        keys = list(rows[0])
        write_rows(out / "scaling.csv", keys, [[r[k] for k in keys] for r in rows])
        write_manifest(out / "manifest.json", kind="scaling", config=emit_config(cfg),
                       mode="weak" if args.weak else "strong", files=["scaling.csv"])
        for r in rows:
            print(f"workers={r['workers']:3d}  n_t={r['n_t']:6d}  {r['status']:9s} "
                  f"{r['iterations']:4d} it  {r['wall_s']:.3f} s  speedup {r['speedup']:.2f}")
        return 0
    code = run(cfg, out, workers)
    print(f"{cfg.name}: exit {code}, artifacts in {out}")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.backend:
            kernels.set_backend(args.backend)
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise UsageError("--workers must be >= 1")
        overrides = _overrides(args)
        if args.list:
            for p in PRESETS.values():
                print(f"{p.name:15s} {p.summary}")
            return 0
        if args.preset:
            if args.preset not in PRESETS:
                raise UsageError(f"unknown preset {args.preset!r}; see --list")
            return _run_preset(args.preset, args.desk, workers, overrides,
                               args.out or f"chronomg-{args.preset}",
                               _worker_list(args.scaling) if args.scaling else None)
        if args.config:
            cfg = load_config(args.config)
            if overrides:
                cfg = cfg.replace(**overrides).validate()
            return _run_config(cfg, args, workers)
        if args.manifest:
            with open(args.manifest) as fh:
                doc = json.load(fh)
            out = args.out or str(Path(args.manifest).parent)
            if doc.get("kind") == "preset":
                return _run_preset(doc["preset"], doc["desk"], doc["workers"], doc["overrides"],
                                   out, doc.get("worker_list"))
            cfg = parse_config(doc["config"])
            return _run_config(cfg, argparse.Namespace(out=out, scaling=None, weak=False), workers)
        parser.print_usage(sys.stderr)
        raise UsageError("one of --preset, --config, --manifest or --list is required")
    except (UsageError, ConfigError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"chronomg: error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
