"""Command-line entry point: ``ddg-lab <command> --config run.toml``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import reports, theory
from .config import ConfigError, ConfigFile, load_config
from .data import DomainDataset, dataset_to_bytes, generate, load_dataset
from .training import TrainingAborted, ablate, evaluate, leave_one_out, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("ddg_lab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _load(args) -> ConfigFile:
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cf = load_config(path)
    if getattr(args, "seed", None) is not None:
        cf = ConfigFile(cf.run.replace(seed=args.seed), cf.paths, cf.ablate_seeds, cf.source)
    return cf


def _out_dir(args, cf: ConfigFile | None) -> Path:
    if args.out:
        return Path(args.out)
    if cf is not None:
        return cf.paths.out_dir
    return Path("out")


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _dataset(cf: ConfigFile, data_arg: str | None = None) -> DomainDataset:
    path = Path(data_arg) if data_arg else cf.paths.dataset
    if path is not None and path.exists():
        ds = load_dataset(path)
        if ds.manifest != cf.run.manifest or tuple(ds.specs) != tuple(cf.run.domains):
            raise ConfigError(f"dataset {path} was generated from a different manifest")
        return ds
    return generate(cf.run.manifest, cf.run.domains)


def _sha(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


# -- commands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cf = _load(args)
    target = Path(args.out) if args.out else (cf.paths.dataset or cf.paths.out_dir / "dataset.ddgd")
    _guard(target, args.force)
    raw = dataset_to_bytes(generate(cf.run.manifest, cf.run.domains))
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(raw)
    print(f"{target} sha256={_sha(raw)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cf = _load(args)
    out = _out_dir(args, cf)
    ck_path = out / "checkpoint.ddgck"
    _guard(ck_path, args.force)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(cf.run, _dataset(cf))
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            ckpt.save(exc.checkpoint, out / "last_good.ddgck")
        log.error("%s", exc)
        return EXIT_ABORT
    raw = ckpt.save(result.checkpoint, ck_path)
    (out / "report.json").write_text(reports.dumps(result.summary()))
    report = reports.LooReport(cf.run.config_hash(), cf.run.seed, [result])
    (out / "report.csv").write_text(reports.loo_csv(report))
    print(f"{ck_path} sha256={_sha(raw)} target_accuracy={result.target_accuracy:.4f} "
          f"val_accuracy={result.val_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ck = ckpt.load(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data)
    elif args.config:
        ds = _dataset(_load(args))
    else:
        ds = generate(ck.config.manifest, ck.config.domains)
    acc = evaluate(ck, ds)
    payload = {"config_hash": ck.config.config_hash(),
               "accuracy": {str(k): v for k, v in acc.items()},
               "target_domain": ck.config.target_domain}
    text = reports.dumps(payload)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def _write_loo(report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for run in report.runs:
        ckpt.save(run.checkpoint, out / f"target_{run.checkpoint.config.target_domain}.ddgck")
    reports.write_loo(report, out)


def cmd_loo(args) -> int:
    cf = _load(args)
    out = _out_dir(args, cf)
    _guard(out / "loo.json", args.force)
    try:
        report = leave_one_out(cf.run, _dataset(cf), args.jobs)
    except TrainingAborted as exc:
        log.error("%s", exc)
        if exc.checkpoint is not None:
            out.mkdir(parents=True, exist_ok=True)
            ckpt.save(exc.checkpoint, out / "last_good.ddgck")
        return EXIT_ABORT
    _write_loo(report, out)
    print(f"average={report.average:.4f} gs={report.gs:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cf = _load(args)
    out = _out_dir(args, cf)
    _guard(out / "ablation.json", args.force)
    seeds = (args.seed,) if args.seed is not None else cf.ablate_seeds
    rows = ablate(cf.run, seeds, _dataset(cf), args.jobs)
    reports.write_ablation(rows, out)
    for row in rows:
        print(f"{row.row:>3} mode={row.mode:<5} comm={int(row.commitment)} avg={row.average:.4f}")
    return EXIT_OK


def _density(d: dict, key: str) -> theory.PiecewiseDensity:
    try:
        return theory.PiecewiseDensity(np.asarray(d[f"{key}_breakpoints"], float),
                                       np.asarray(d[f"{key}_densities"], float))
    except KeyError as exc:
        raise ConfigError(f"pair is missing {exc.args[0]!r}") from exc


def cmd_theorem_check(args) -> int:
    suite = {"seed": 0, "n_pairs": 200, "b_values": [0.5, 1.0, 3.0]}
    pairs = []
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"spec file not found: {path}")
        raw = tomllib.loads(path.read_text())
        unknown = sorted(set(raw) - {"suite", "pairs"})
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r}")
        extra = sorted(set(raw.get("suite", {})) - set(suite))
        if extra:
            raise ConfigError(f"suite: unknown key {extra[0]!r}")
        suite.update(raw.get("suite", {}))
        pairs = raw.get("pairs", [])
    if args.seed is not None:
        suite["seed"] = args.seed
    result = theory.randomized_suite(suite["seed"], suite["n_pairs"], tuple(suite["b_values"]))
    pair_reports = []
    violations = result.violations
    for i, pair in enumerate(pairs):
        allowed = {"p_breakpoints", "p_densities", "q_breakpoints", "q_densities", "intervals", "b_phi"}
        extra = sorted(set(pair) - allowed)
        if extra:
            raise ConfigError(f"pairs[{i}]: unknown key {extra[0]!r}")
        p, q = _density(pair, "p"), _density(pair, "q")
        part = theory.Partition.uniform(p.lo, p.hi, int(pair.get("intervals", 1)))
        try:
            rep = theory.theorem_check(p, q, part, float(pair.get("b_phi", 1.0)))
            pair_reports.append(rep.to_dict())
        except theory.TheoremViolation as exc:
            violations += 1
            pair_reports.append({"error": str(exc)})
    payload = {"suite": result.to_dict(), "pairs": pair_reports, "violations": violations}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gap_report.json").write_text(reports.dumps(payload))
        (out / "refinement.csv").write_text(refinement_csv(suite["seed"]))
    print(reports.dumps(payload), end="")
    return EXIT_OK if violations == 0 and result.equality_failures == 0 else EXIT_FAIL


def refinement_csv(seed: int, n: int = 2000, max_depth: int = 8) -> str:
    """Histogram L1 between two Gaussian samples over dyadic partitions of [-4, 4]."""
    from .rng import Rng
    rng = Rng(seed)
    a = rng.normal(n)
    b = rng.normal(n, mean=0.5, std=1.2)
    rows = []
    for depth in range(1, max_depth + 1):
        lc, lf = theory.empirical_refinement_check(
            a, b, theory.dyadic_partition(-4, 4, depth - 1), theory.dyadic_partition(-4, 4, depth))
        rows.append([depth, depth - 1, lc, lf])
    return reports._csv(rows, ["depth", "coarse_depth", "l1_coarse", "l1_fine"])


def cmd_inspect_codebook(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ck = ckpt.load(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data)
    elif args.config:
        ds = _dataset(_load(args))
    else:
        ds = generate(ck.config.manifest, ck.config.domains)
    out = Path(args.out) if args.out else Path("inspect")
    _guard(out / "inspect.json", args.force)
    ins = reports.inspect_codebook(ck, ds)
    reports.write_inspection(ins, ds, out, ck.config.config_hash())
    print(f"perplexity={ins.perplexity:.3f} dead={ins.dead} -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "ablate": cmd_ablate,
    "theorem-check": cmd_theorem_check,
    "inspect-codebook": cmd_inspect_codebook,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddg-lab", description=__doc__)
    parser.add_argument("-q", "--quiet", action="store_true", help="hide per-validation progress lines")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true")
        p.add_argument("--jobs", type=int, default=1)
        if name in ("eval", "inspect-codebook"):
            p.add_argument("--checkpoint")
            p.add_argument("--data")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
