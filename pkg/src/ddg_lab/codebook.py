"""Discrete codebook: nearest-codeword quantization, losses and EMA updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

MODES = ("ema", "sgd", "fixed", "none")
COUNT_FLOOR = 1e-12


@dataclass
class Codebook:
    """N codewords of width d plus the EMA accumulators behind them.

    ``mode`` controls how codewords move: ``ema`` (running centroids),
    ``sgd`` (gradient of the VQ loss), ``fixed`` (never updated) or
    ``none`` (no quantization at all; features pass through unchanged).
    """

    codewords: Tensor
    ema_counts: np.ndarray
    ema_sums: np.ndarray
    gamma: float = 0.99
    mode: str = "ema"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown codebook mode {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        n, d = self.codewords.shape
        if self.ema_counts.shape != (n,) or self.ema_sums.shape != (n, d):
            raise ValueError("accumulator shapes do not match codewords")
        self.codewords.requires_grad = self.mode == "sgd"

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    @property
    def quantizes(self) -> bool:
        return self.mode != "none"

    def copy(self) -> "Codebook":
        return Codebook(Tensor(self.codewords.data.copy()), self.ema_counts.copy(),
                        self.ema_sums.copy(), self.gamma, self.mode)


def init_codebook(n: int, dim: int, seed: int, gamma: float = 0.99, mode: str = "ema") -> Codebook:
    """Counts of one, sums drawn from N(0, 1), codewords equal to the sums."""
    if n < 1 or dim < 1:
        raise ValueError("codebook needs n >= 1 and dim >= 1")
    sums = Rng(seed).normal(n * dim).reshape(n, dim)
    return Codebook(Tensor(sums.copy()), np.ones(n), sums, gamma, mode)


@dataclass
class QuantizeResult:
    quantized: Tensor  # same shape as the input, values are exact codewords
    indices: np.ndarray  # input shape without the channel axis
    sq_distances: np.ndarray


def nearest_codewords(flat: np.ndarray, codewords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the L2-nearest codeword per row and its squared distance.

    Candidates are screened with the expanded form ``|z|^2 - 2 z.e + |e|^2``;
    any row with more than one near-minimal candidate is resolved on exact
    differences, keeping the lowest index among true ties.
    """
    z2 = (flat * flat).sum(axis=1)
    e2 = (codewords * codewords).sum(axis=1)
    approx = z2[:, None] - 2.0 * (flat @ codewords.T) + e2[None, :]
    best = approx.min(axis=1)
    tol = 1e-9 * (z2 + e2.max()) + 1e-12
    near = approx <= (best + tol)[:, None]
    idx = np.argmax(near, axis=1)
    for row in np.flatnonzero(near.sum(axis=1) > 1):
        cand = np.flatnonzero(near[row])
        diff = flat[row][None, :] - codewords[cand]
        exact = (diff * diff).sum(axis=1)
        idx[row] = cand[int(np.argmin(exact))]
    diff = flat - codewords[idx]
    return idx, (diff * diff).sum(axis=1)


def straight_through(z: Tensor, quantized: np.ndarray) -> Tensor:
    """Tensor holding ``quantized`` whose gradient is copied onto ``z`` unchanged."""
    if quantized.shape != z.shape:
        raise ad.ShapeError("straight_through: shape mismatch")
    return ad.make_op(quantized, (z,), lambda g: (g,), "straight_through")


def quantize(z: Tensor, cb: Codebook) -> QuantizeResult:
    """Replace every feature vector (last axis) by its nearest codeword."""
    if z.shape[-1] != cb.dim:
        raise ad.ShapeError(f"feature width {z.shape[-1]} != codeword width {cb.dim}")
    lead = z.shape[:-1]
    flat = z.data.reshape(-1, cb.dim)
    idx, dist = nearest_codewords(flat, cb.codewords.data)
    q = cb.codewords.data[idx].reshape(z.shape)
    return QuantizeResult(straight_through(z, q), idx.reshape(lead), dist.reshape(lead))


def _mean_square(diff: Tensor) -> Tensor:
    return ad.mean(ad.mul(diff, diff))


def commitment_loss(z: Tensor, zq) -> Tensor:
    """Mean of ``(z - sg(zq))**2`` over all entries; gradient reaches ``z`` only."""
    zq_data = zq.data if isinstance(zq, Tensor) else np.asarray(zq, dtype=np.float64)
    if zq_data.shape != z.shape:
        raise ad.ShapeError(f"commitment_loss: {z.shape} vs {zq_data.shape}")
    return _mean_square(ad.sub(z, Tensor(zq_data)))


def vq_loss(z, cb: Codebook, indices: np.ndarray) -> Tensor:
    """Mean of ``(sg(z) - e[indices])**2``; gradient reaches the selected codewords."""
    if cb.mode != "sgd":
        raise ValueError(f"vq_loss needs an sgd-mode codebook, got {cb.mode!r}")
    z_data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    flat = z_data.reshape(-1, cb.dim)
    chosen = ad.gather_rows(cb.codewords, np.asarray(indices).reshape(-1))
    return _mean_square(ad.sub(Tensor(flat), chosen))


def disc_loss(z: Tensor, cb: Codebook, result: QuantizeResult, eta: float = 0.25,
              use_commitment: bool = True) -> Tensor:
    """``L_vq + eta * L_comm`` for the gradient-trained codebook variant."""
    loss = vq_loss(z, cb, result.indices)
    if use_commitment:
        loss = ad.add(loss, ad.scale(commitment_loss(z, result.quantized), eta))
    return loss


def ema_update(cb: Codebook, z, indices: np.ndarray, rng: Rng | None = None,
               reseed_below: float | None = None) -> Codebook:
    """One decayed-count/decayed-sum step, then ``e_v = m_v / N_v`` for all v.

    Codewords with no assigned vectors still decay their count and sum.  When
    ``reseed_below`` is set, codewords whose count falls under it are moved to
    a random vector of this batch (count reset to one).
    """
    if cb.mode != "ema":
        raise ValueError(f"ema_update needs an ema-mode codebook, got {cb.mode!r}")
    z_data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    flat = z_data.reshape(-1, cb.dim)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.shape[0] != flat.shape[0]:
        raise ValueError(f"{idx.shape[0]} assignments for {flat.shape[0]} vectors")
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise ValueError("assignment index out of range")
    counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.ema_sums)
    np.add.at(sums, idx, flat)
    g = cb.gamma
    cb.ema_counts = g * cb.ema_counts + (1.0 - g) * counts
    cb.ema_sums = g * cb.ema_sums + (1.0 - g) * sums
    if reseed_below is not None and flat.shape[0]:
        dead = np.flatnonzero(cb.ema_counts < reseed_below)
        if dead.size:
            rng = rng or Rng(0)
            picks = rng.integers(dead.size, flat.shape[0])
            cb.ema_counts[dead] = 1.0
            cb.ema_sums[dead] = flat[picks]
    cb.codewords.data = cb.ema_sums / np.maximum(cb.ema_counts, COUNT_FLOOR)[:, None]
    return cb


@dataclass
class CodewordStats:
    histogram: np.ndarray
    perplexity: float
    dead: int
    total: int = field(default=0)


def codeword_stats(indices, n_codewords: int) -> CodewordStats:
    """Usage histogram, perplexity ``exp(H)`` and the number of unused codewords."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("codeword_stats needs at least one assignment")
    hist = np.bincount(idx, minlength=n_codewords)
    if hist.shape[0] != n_codewords:
        raise ValueError("assignment index out of range")
    p = hist[hist > 0] / idx.size
    entropy = float(-(p * np.log(p)).sum())
    return CodewordStats(hist, float(np.exp(entropy)), int((hist == 0).sum()), int(idx.size))
