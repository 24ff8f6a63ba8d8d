"""Training loop, leave-one-domain-out protocol and the component ablation."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .codebook import Codebook, codeword_stats, commitment_loss, ema_update, init_codebook, nearest_codewords, vq_loss
from .config import RunConfig, config_hash
from .data import DomainDataset, batches, generate, split_train_val
from .model import (LossWeights, ModelParams, TeacherState, classify, encode, forward, init_params,
                    make_teacher, predict, teacher_ema_update, total_loss)
from .rng import Rng, derive_seed
from .theory import gs_metric, histogram_l1

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


class LeakageError(RuntimeError):
    pass


# -- evaluation ----------------------------------------------------------

def accuracy_by_domain(params: ModelParams, cb: Codebook, dataset: DomainDataset) -> dict[int, float]:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.manifest.n_classes != params.n_classes:
        raise ValueError(f"dataset has {dataset.manifest.n_classes} classes, model {params.n_classes}")
    pred = predict(dataset.images, params, cb, dataset.manifest.patch)
    correct = pred == dataset.labels
    return {int(d): float(correct[dataset.domains == d].mean()) for d in np.unique(dataset.domains)}


def overall_accuracy(params: ModelParams, cb: Codebook, dataset: DomainDataset) -> float:
    pred = predict(dataset.images, params, cb, dataset.manifest.patch)
    return float((pred == dataset.labels).mean())


def evaluate(checkpoint: Checkpoint, dataset: DomainDataset) -> dict[int, float]:
    """Student + codebook accuracy per domain present in ``dataset``."""
    return accuracy_by_domain(checkpoint.student, checkpoint.codebook, dataset)


# -- feature-level gap measurements --------------------------------------

def quantized_features(params: ModelParams, cb: Codebook, images: np.ndarray, patch: int,
                       chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Continuous patch features (n_cells, d) and their codeword indices."""
    feats = []
    for start in range(0, len(images), chunk):
        feats.append(encode(images[start:start + chunk], params, patch).data.reshape(-1, cb.dim))
    z = np.concatenate(feats)
    idx, _ = nearest_codewords(z, cb.codewords.data)
    return z, idx


def fine_labels(z: np.ndarray, idx: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Refine each Voronoi cell by the orthant of ``z - e_k``; one int label per row."""
    signs = (z - codewords[idx]) > 0
    bits = (signs * (1 << np.arange(signs.shape[1], dtype=np.int64))).sum(axis=1)
    return idx.astype(np.int64) * (1 << signs.shape[1]) + bits


@dataclass
class GapMeasurement:
    source: int
    target: int
    quantized_l1: float
    continuous_l1: float


def gap_measurements(params: ModelParams, cb: Codebook, dataset: DomainDataset,
                     pairs: list[tuple[int, int]]) -> list[GapMeasurement]:
    """Codeword-usage L1 vs fine-partition L1 between domain feature samples."""
    cache = {}
    for d in sorted({x for p in pairs for x in p}):
        sub = dataset.only_domains([d])
        cache[d] = quantized_features(params, cb, sub.images, dataset.manifest.patch)
    out = []
    for a, b in pairs:
        za, ia = cache[a]
        zb, ib = cache[b]
        coarse = histogram_l1(ia, ib)
        fine = histogram_l1(fine_labels(za, ia, cb.codewords.data), fine_labels(zb, ib, cb.codewords.data))
        out.append(GapMeasurement(a, b, coarse, fine))
    return out


# -- training ------------------------------------------------------------

@dataclass
class RunResult:
    checkpoint: Checkpoint
    target_accuracy: float
    val_accuracy: float
    source_val_by_domain: dict[int, float]
    codebook_perplexity: float | None
    dead_codewords: int | None
    gaps: list[GapMeasurement]
    history: list[dict] = field(default_factory=list)
    config_hash: str = ""
    wall_time: float = 0.0

    def summary(self) -> dict:
        return {
            "target_domain": self.checkpoint.config.target_domain,
            "target_accuracy": self.target_accuracy,
            "val_accuracy": self.val_accuracy,
            "best_iteration": self.checkpoint.iteration,
            "source_val_by_domain": {str(k): v for k, v in self.source_val_by_domain.items()},
            "codebook_perplexity": self.codebook_perplexity,
            "dead_codewords": self.dead_codewords,
            "gaps": [dataclasses.asdict(g) for g in self.gaps],
            "seed": self.checkpoint.config.seed,
            "config_hash": self.config_hash,
            "wall_time": self.wall_time,
        }


def _snapshot(config, student, teacher, cb, iteration, best) -> Checkpoint:
    return Checkpoint(config, student.copy(requires_grad=True),
                      TeacherState(teacher.params.copy(requires_grad=False), teacher.decay),
                      cb.copy(), iteration, best)


def _teacher_logits(images, teacher: TeacherState, cb: Codebook, patch: int) -> np.ndarray:
    z = encode(images, teacher.params, patch)
    if cb.quantizes:
        idx, _ = nearest_codewords(z.data.reshape(-1, cb.dim), cb.codewords.data)
        z = ad.Tensor(cb.codewords.data[idx].reshape(z.shape))
    return classify(z, teacher.params).data


def source_split(config: RunConfig, dataset: DomainDataset) -> tuple[DomainDataset, DomainDataset]:
    sources = dataset.without_domain(config.target_domain)
    train_set, val_set = split_train_val(sources, config.val_fraction, derive_seed(config.seed, "split"))
    for part in (train_set, val_set):
        if (part.domains == config.target_domain).any():
            raise LeakageError("target-domain sample in training or validation data")
    return train_set, val_set


def train(config: RunConfig, dataset: DomainDataset | None = None, measure_gaps: bool = True) -> RunResult:
    """Train one student/teacher/codebook triple with ``config.target_domain`` held out.

    Returns the checkpoint with the best source-validation accuracy.
    """
    config.validate()
    started = time.perf_counter()
    if dataset is None:
        dataset = generate(config.manifest, config.domains)
    m = config.manifest
    patch = m.patch
    train_set, val_set = source_split(config, dataset)

    student = init_params(derive_seed(config.seed, "model"), patch * patch, config.codebook.dim,
                          m.n_classes, tuple(config.hidden))
    teacher = make_teacher(student, config.teacher_decay)
    ccfg = config.codebook
    cb = init_codebook(ccfg.size, ccfg.dim, derive_seed(config.seed, "codebook"), ccfg.gamma, ccfg.mode)
    reseed_rng = Rng(derive_seed(config.seed, "reseed"))
    params = student.parameters() + ([cb.codewords] if cb.mode == "sgd" else [])
    opt = ad.SGD(params, config.lr, config.momentum, config.weight_decay)
    decay_step = int(round(config.lr_decay_at * config.iterations))
    w: LossWeights = config.weights

    best = _snapshot(config, student, teacher, cb, 0, -1.0)
    last_good = best
    history: list[dict] = []
    epoch = 0
    stream = batches(train_set, config.batch_size, derive_seed(config.seed, "epoch", epoch))
    for it in range(1, config.iterations + 1):
        if it == decay_step + 1 and decay_step < config.iterations:
            opt.lr = config.lr * config.lr_decay_factor
        try:
            images, labels = next(stream)
        except StopIteration:
            epoch += 1
            stream = batches(train_set, config.batch_size, derive_seed(config.seed, "epoch", epoch))
            images, labels = next(stream)
        try:
            out = forward(images, student, cb, patch)
            t_logits = _teacher_logits(images, teacher, cb, patch)
            comm = None
            extra = None
            if out.quant is not None and ccfg.commitment:
                comm = commitment_loss(out.features, out.quant.quantized)
            if cb.mode == "sgd":
                # gradient-trained codebook: L_disc = L_vq + eta * L_comm replaces beta * L_comm
                extra = vq_loss(out.features, cb, out.quant.indices)
                if comm is not None:
                    extra = ad.add(extra, ad.scale(comm, w.eta))
                    comm_weights = dataclasses.replace(w, beta=0.0)
                else:
                    comm_weights = w
                terms = total_loss(out.logits, t_logits, labels, comm, comm_weights)
                loss = ad.add(terms.total, extra)
            else:
                terms = total_loss(out.logits, t_logits, labels, comm, w)
                loss = terms.total
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            for p in params:
                if not np.isfinite(p.data).all():
                    raise ad.NonFiniteError("non-finite parameter after SGD step")
        except ad.NonFiniteError as exc:
            raise TrainingAborted(f"non-finite value at iteration {it}: {exc}", last_good) from exc
        if cb.mode == "ema":
            ema_update(cb, out.features.data, out.quant.indices, reseed_rng, ccfg.reseed_below)
        teacher_ema_update(teacher, student)

        if it % config.val_every == 0 or it == config.iterations:
            val_acc = overall_accuracy(student, cb, val_set)
            perp = None
            if out.quant is not None:
                perp = codeword_stats(out.quant.indices, cb.size).perplexity
            row = {"iteration": it, "loss": loss.item(), "cla": terms.cla, "con": terms.con,
                   "comm": terms.comm, "val_acc": val_acc, "perplexity": perp, "lr": opt.lr}
            history.append(row)
            log.info("it=%d loss=%.5f cla=%.5f con=%.5f comm=%.5f val=%.4f perplexity=%s",
                     it, row["loss"], terms.cla, terms.con, terms.comm, val_acc,
                     "-" if perp is None else f"{perp:.2f}")
            last_good = _snapshot(config, student, teacher, cb, it, max(val_acc, best.best_val))
            if val_acc >= best.best_val:  # ties go to the later, longer-trained checkpoint
                best = _snapshot(config, student, teacher, cb, it, val_acc)

    target = dataset.only_domains([config.target_domain])
    target_acc = overall_accuracy(best.student, best.codebook, target) if len(target) else float("nan")
    src_val = accuracy_by_domain(best.student, best.codebook, val_set)
    perp = dead = None
    gaps: list[GapMeasurement] = []
    if best.codebook.quantizes:
        _, idx = quantized_features(best.student, best.codebook, val_set.images, patch)
        st = codeword_stats(idx, best.codebook.size)
        perp, dead = st.perplexity, st.dead
        if measure_gaps and len(target):
            pairs = [(s, config.target_domain) for s in sorted(src_val)]
            eval_set = DomainDataset(dataset.manifest, dataset.specs,
                                     np.concatenate([val_set.images, target.images]),
                                     np.concatenate([val_set.labels, target.labels]),
                                     np.concatenate([val_set.domains, target.domains]))
            gaps = gap_measurements(best.student, best.codebook, eval_set, pairs)
    return RunResult(best, target_acc, best.best_val, src_val, perp, dead, gaps, history,
                     config.config_hash(), time.perf_counter() - started)


# -- protocols -----------------------------------------------------------

def target_config(template: RunConfig, target: int) -> RunConfig:
    """Per-target run config; the seed depends only on (master seed, target id)."""
    return template.replace(target_domain=target, seed=derive_seed(template.seed, "target", target))


def _train_worker(args):
    config, dataset = args
    return train(config, dataset)


def max_jobs(requested: int | None) -> int:
    jobs = requested or 1
    cap = os.environ.get("DDG_LAB_THREADS")
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return max(1, jobs)


@dataclass
class LooReport:
    template_hash: str
    master_seed: int
    runs: list[RunResult]

    @property
    def target_accuracies(self) -> dict[int, float]:
        return {r.checkpoint.config.target_domain: r.target_accuracy for r in self.runs}

    @property
    def average(self) -> float:
        return float(np.mean(list(self.target_accuracies.values())))

    @property
    def gs(self) -> float:
        return gs_metric([100.0 * a for a in self.target_accuracies.values()])

    @property
    def mean_val_accuracy(self) -> float:
        return float(np.mean([r.val_accuracy for r in self.runs]))

    def to_dict(self) -> dict:
        return {
            "config_hash": self.template_hash,
            "master_seed": self.master_seed,
            "target_accuracy": {str(k): v for k, v in self.target_accuracies.items()},
            "average": self.average,
            "gs": self.gs,
            "mean_val_accuracy": self.mean_val_accuracy,
            "runs": [r.summary() for r in self.runs],
        }


def leave_one_out(template: RunConfig, dataset: DomainDataset | None = None, jobs: int | None = 1,
                  targets: list[int] | None = None) -> LooReport:
    """Train one model per held-out domain and aggregate target accuracies."""
    template.validate()
    if dataset is None:
        dataset = generate(template.manifest, template.domains)
    targets = list(range(template.manifest.n_domains)) if targets is None else list(targets)
    configs = [target_config(template, t) for t in targets]
    n_jobs = max_jobs(jobs)
    if n_jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(_train_worker, [(c, dataset) for c in configs]))
    else:
        runs = [train(c, dataset) for c in configs]
    runs.sort(key=lambda r: r.checkpoint.config.target_domain)
    return LooReport(config_hash(template.to_dict()), template.seed, runs)


ABLATION_ROWS = {
    # id: (codebook mode, commitment on, teacher consistency on)
    "I": ("none", False, False),
    "II": ("fixed", True, True),
    "III": ("sgd", False, True),
    "IV": ("ema", False, True),
    "V": ("sgd", True, True),
    "VI": ("ema", True, True),
}


def ablation_config(template: RunConfig, row: str) -> RunConfig:
    mode, comm, teacher = ABLATION_ROWS[row]
    cfg = template.replace(codebook=dataclasses.replace(template.codebook, mode=mode, commitment=comm))
    if not teacher:
        cfg = cfg.replace(weights=dataclasses.replace(cfg.weights, alpha=0.0, beta=0.0))
    return cfg


@dataclass
class AblationRow:
    row: str
    mode: str
    commitment: bool
    per_seed: list[LooReport]

    @property
    def target_accuracy(self) -> dict[int, float]:
        doms = sorted(self.per_seed[0].target_accuracies)
        return {d: float(np.mean([r.target_accuracies[d] for r in self.per_seed])) for d in doms}

    @property
    def average(self) -> float:
        return float(np.mean([r.average for r in self.per_seed]))

    @property
    def val_accuracy(self) -> float:
        return float(np.mean([r.mean_val_accuracy for r in self.per_seed]))


def ablate(template: RunConfig, seeds=(0, 1, 2), dataset: DomainDataset | None = None,
           jobs: int | None = 1, rows=tuple(ABLATION_ROWS)) -> list[AblationRow]:
    """Leave-one-out for each component row, averaged over master seeds."""
    if len(seeds) < 1:
        raise ValueError("ablation needs at least one seed")
    out = []
    for row in rows:
        cfg = ablation_config(template, row)
        reports = [leave_one_out(cfg.replace(seed=s), dataset, jobs) for s in seeds]
        out.append(AblationRow(row, ABLATION_ROWS[row][0], ABLATION_ROWS[row][1], reports))
    return out
