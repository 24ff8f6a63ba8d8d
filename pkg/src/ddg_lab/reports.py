"""Report files (CSV + JSON) and codebook inspection.

CSV columns
-----------
loo.csv       target_domain, target_accuracy, val_accuracy, best_iteration,
              codebook_perplexity, dead_codewords, seed, config_hash
ablation.csv  row, mode, commitment, domain_<d> (one per domain), average,
              val_accuracy, n_seeds, config_hash
gaps.csv      target_domain, source_domain, quantized_l1, continuous_l1
indices.csv   sample, domain, label, cell_<i>_<j> (codeword index per patch)
usage.csv     codeword, count, <per-domain counts as domain_<d>>
domain_l1.csv domain_a, domain_b, quantized_l1, continuous_l1
refinement.csv depth, coarse_depth, l1_coarse, l1_fine

All JSON files carry ``config_hash``; only ``wall_time`` fields vary
between identical runs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .codebook import codeword_stats
from .config import config_hash
from .data import DomainDataset
from .theory import empirical_refinement_check
from .training import AblationRow, LooReport, fine_labels, quantized_features


class HashMismatch(ValueError):
    pass


def experiment_hash(config_dict: dict) -> str:
    """Config hash ignoring the run seed and the held-out domain."""
    d = dict(config_dict)
    d.pop("seed", None)
    d.pop("target_domain", None)
    return config_hash(d)


def check_same_experiment(reports: list[LooReport]) -> str:
    hashes = {experiment_hash(r.runs[0].checkpoint.config.to_dict()) for r in reports}
    if len(hashes) != 1:
        raise HashMismatch(f"refusing to aggregate reports from {len(hashes)} different configs")
    return hashes.pop()


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    if x is None:
        return ""
    return x


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def loo_csv(report: LooReport) -> str:
    rows = []
    for r in report.runs:
        c = r.checkpoint.config
        rows.append([c.target_domain, r.target_accuracy, r.val_accuracy, r.checkpoint.iteration,
                     r.codebook_perplexity, r.dead_codewords, c.seed, r.config_hash])
    return _csv(rows, ["target_domain", "target_accuracy", "val_accuracy", "best_iteration",
                       "codebook_perplexity", "dead_codewords", "seed", "config_hash"])


def gaps_csv(report: LooReport) -> str:
    rows = [[g.target, g.source, g.quantized_l1, g.continuous_l1] for r in report.runs for g in r.gaps]
    return _csv(rows, ["target_domain", "source_domain", "quantized_l1", "continuous_l1"])


def write_loo(report: LooReport, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"csv": out_dir / "loo.csv", "json": out_dir / "loo.json", "gaps": out_dir / "gaps.csv"}
    _write(paths["csv"], loo_csv(report))
    _write(paths["gaps"], gaps_csv(report))
    _write(paths["json"], dumps(report.to_dict()))
    return paths


def ablation_dict(rows: list[AblationRow]) -> dict:
    out = []
    for row in rows:
        h = check_same_experiment(row.per_seed)
        out.append({
            "row": row.row, "mode": row.mode, "commitment": row.commitment,
            "target_accuracy": {str(k): v for k, v in row.target_accuracy.items()},
            "average": row.average, "val_accuracy": row.val_accuracy,
            "seeds": [r.master_seed for r in row.per_seed], "config_hash": h,
            "wall_time": sum(run.wall_time for r in row.per_seed for run in r.runs),
        })
    return {"rows": out}


def ablation_csv(rows: list[AblationRow]) -> str:
    doms = sorted(rows[0].target_accuracy)
    table = []
    for row in rows:
        acc = row.target_accuracy
        table.append([row.row, row.mode, row.commitment, *[acc[d] for d in doms], row.average,
                      row.val_accuracy, len(row.per_seed), check_same_experiment(row.per_seed)])
    return _csv(table, ["row", "mode", "commitment", *[f"domain_{d}" for d in doms], "average",
                        "val_accuracy", "n_seeds", "config_hash"])


def write_ablation(rows: list[AblationRow], out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"csv": out_dir / "ablation.csv", "json": out_dir / "ablation.json"}
    _write(paths["csv"], ablation_csv(rows))
    _write(paths["json"], dumps(ablation_dict(rows)))
    return paths


# -- codebook inspection -------------------------------------------------

@dataclass
class Inspection:
    index_maps: np.ndarray  # (n, g, g)
    usage: np.ndarray  # (N,)
    usage_by_domain: dict[int, np.ndarray]
    domains: list[int]
    quantized_l1: np.ndarray  # (M, M)
    continuous_l1: np.ndarray  # (M, M)
    perplexity: float
    dead: int


def inspect_codebook(checkpoint: Checkpoint, dataset: DomainDataset) -> Inspection:
    """Patch-to-codeword index grids plus cross-domain usage distances."""
    cb = checkpoint.codebook
    if not cb.quantizes:
        raise ValueError("checkpoint was trained without quantization")
    if checkpoint.student.feature_dim != cb.dim:
        raise ValueError("encoder width does not match codeword width")
    if checkpoint.student.patch_dim != dataset.manifest.patch ** 2:
        raise ValueError("dataset patch size does not match the checkpoint encoder")
    g = dataset.manifest.grid
    z, idx = quantized_features(checkpoint.student, cb, dataset.images, dataset.manifest.patch)
    maps = idx.reshape(len(dataset), g, g)
    fine = fine_labels(z, idx, cb.codewords.data)
    cell_domain = np.repeat(dataset.domains, g * g)
    doms = [int(d) for d in np.unique(dataset.domains)]
    qd = np.zeros((len(doms), len(doms)))
    cd = np.zeros_like(qd)
    for i, a in enumerate(doms):
        for j, b in enumerate(doms):
            if j <= i:
                continue
            ma, mb = cell_domain == a, cell_domain == b
            lc, lf = empirical_refinement_check(
                np.flatnonzero(ma), np.flatnonzero(mb),
                lambda rows: idx[rows], lambda rows: fine[rows])
            qd[i, j] = qd[j, i] = lc
            cd[i, j] = cd[j, i] = lf
    st = codeword_stats(idx, cb.size)
    by_dom = {d: np.bincount(idx[cell_domain == d], minlength=cb.size) for d in doms}
    return Inspection(maps, st.histogram, by_dom, doms, qd, cd, st.perplexity, st.dead)


def write_inspection(ins: Inspection, dataset: DomainDataset, out_dir: Path, ck_hash: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    g = ins.index_maps.shape[1]
    cells = [f"cell_{i}_{j}" for i in range(g) for j in range(g)]
    rows = [[k, int(dataset.domains[k]), int(dataset.labels[k]), *ins.index_maps[k].reshape(-1).tolist()]
            for k in range(len(dataset))]
    paths = {"indices": out_dir / "indices.csv", "usage": out_dir / "usage.csv",
             "domain_l1": out_dir / "domain_l1.csv", "json": out_dir / "inspect.json"}
    _write(paths["indices"], _csv(rows, ["sample", "domain", "label", *cells]))
    usage_rows = [[v, int(ins.usage[v]), *[int(ins.usage_by_domain[d][v]) for d in ins.domains]]
                  for v in range(ins.usage.size)]
    _write(paths["usage"], _csv(usage_rows, ["codeword", "count", *[f"domain_{d}" for d in ins.domains]]))
    pair_rows = []
    for i, a in enumerate(ins.domains):
        for j, b in enumerate(ins.domains):
            if j > i:
                pair_rows.append([a, b, float(ins.quantized_l1[i, j]), float(ins.continuous_l1[i, j])])
    _write(paths["domain_l1"], _csv(pair_rows, ["domain_a", "domain_b", "quantized_l1", "continuous_l1"]))
    _write(paths["json"], dumps({
        "checkpoint_config_hash": ck_hash,
        "samples": len(dataset),
        "cells": int(ins.usage.sum()),
        "perplexity": ins.perplexity,
        "dead_codewords": ins.dead,
        "domains": ins.domains,
        "quantized_l1": ins.quantized_l1.tolist(),
        "continuous_l1": ins.continuous_l1.tolist(),
    }))
    return paths
