"""Synthetic multi-domain image data.

Class identity is carried by a shape motif; domains differ only in style:
a per-domain gain and bias on intensities, an additive background texture,
and the amplitude of additive Gaussian noise.  A styled image is

    x = gain * motif + bias + background_amp * pattern + noise * eps

with ``motif`` in [0, 1] and ``eps`` a unit normal field.  Every sample draws
its motif parameters and ``eps`` from its own stream seeded by
``derive_seed(seed, "sample", domain, index)``, so the whole dataset is a
pure function of the manifest and the domain specs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng, derive_seed

MOTIFS = ("hbar", "vbar", "diag", "antidiag", "block", "cross", "ring", "dots")
PATTERNS = ("flat", "checker", "gradient", "stripes")


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    n_classes: int = 5
    n_domains: int = 4
    per_domain: int = 500
    side: int = 28
    patch: int = 4

    def validate(self) -> None:
        if not 2 <= self.n_classes <= len(MOTIFS):
            raise ValueError(f"n_classes must be in [2, {len(MOTIFS)}]")
        if not 3 <= self.n_domains <= 255:
            raise ValueError("n_domains must be in [3, 255]")
        if self.per_domain < 1:
            raise ValueError("per_domain must be >= 1")
        if self.patch < 1 or self.side < self.patch or self.side % self.patch:
            raise ValueError(f"image side {self.side} is not divisible by patch {self.patch}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def grid(self) -> int:
        return self.side // self.patch


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    gain: float = 1.0
    bias: float = 0.0
    noise: float = 0.0
    pattern: int = 0
    pattern_amp: float = 0.0

    def validate(self) -> None:
        if not self.gain > 0:
            raise ValueError(f"domain {self.domain_id}: gain must be positive")
        if self.noise < 0 or self.pattern_amp < 0:
            raise ValueError(f"domain {self.domain_id}: amplitudes must be >= 0")
        if not 0 <= self.pattern < len(PATTERNS):
            raise ValueError(f"domain {self.domain_id}: unknown pattern {self.pattern}")


def default_domain_specs(n_domains: int = 4) -> list[DomainSpec]:
    base = [
        DomainSpec(0, gain=1.0, bias=0.0, noise=0.05, pattern=0, pattern_amp=0.0),
        DomainSpec(1, gain=0.7, bias=0.2, noise=0.10, pattern=1, pattern_amp=0.1),
        DomainSpec(2, gain=1.5, bias=-0.2, noise=0.05, pattern=2, pattern_amp=0.4),
        DomainSpec(3, gain=0.8, bias=0.1, noise=0.20, pattern=3, pattern_amp=0.15),
    ]
    specs = []
    for d in range(n_domains):
        s = base[d % len(base)]
        specs.append(replace(s, domain_id=d, gain=s.gain * (1.0 + 0.1 * (d // len(base)))))
    return specs


def background(pattern: int, side: int) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    name = PATTERNS[pattern]
    if name == "flat":
        return np.zeros((side, side))
    if name == "checker":
        return ((x + y) % 2).astype(np.float64)
    if name == "gradient":
        return (x + y) / (2.0 * (side - 1))
    return (y % 2).astype(np.float64)  # stripes


def render_motif(label: int, side: int, params: np.ndarray) -> np.ndarray:
    """Draw motif ``label`` from four uniforms (dx, dy, thickness, intensity)."""
    dx = int(params[0] * 7) - 3
    dy = int(params[1] * 7) - 3
    thick = 2 + int(params[2] * 2)
    level = 0.7 + 0.3 * params[3]
    y, x = np.mgrid[0:side, 0:side]
    cx = (side - 1) / 2.0 + dx
    cy = (side - 1) / 2.0 + dy
    u, v = x - cx, y - cy
    half = side * 0.3
    t = thick / 2.0
    name = MOTIFS[label]
    if name == "hbar":
        mask = (np.abs(v) < t) & (np.abs(u) <= half)
    elif name == "vbar":
        mask = (np.abs(u) < t) & (np.abs(v) <= half)
    elif name == "diag":
        mask = (np.abs(u - v) < t * 1.4) & (np.abs(u) <= half * 0.8)
    elif name == "antidiag":
        mask = (np.abs(u + v) < t * 1.4) & (np.abs(u) <= half * 0.8)
    elif name == "block":
        mask = (np.abs(u) <= half * 0.5) & (np.abs(v) <= half * 0.5)
    elif name == "cross":
        mask = ((np.abs(v) < t) & (np.abs(u) <= half)) | ((np.abs(u) < t) & (np.abs(v) <= half))
    elif name == "ring":
        r = np.sqrt(u * u + v * v)
        mask = np.abs(r - half * 0.7) < t
    else:  # dots
        mask = ((np.round(u) % 4 == 0) & (np.round(v) % 4 == 0)) & (np.abs(u) <= half) & (np.abs(v) <= half)
    return np.where(mask, level, 0.0)


def render_sample(manifest: DatasetManifest, spec: DomainSpec, label: int,
                  instance_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (styled image, motif) for one instance."""
    rng = Rng(instance_seed)
    params = rng.uniform(4)
    motif = render_motif(label, manifest.side, params)
    eps = rng.normal(manifest.side * manifest.side).reshape(manifest.side, manifest.side)
    styled = (spec.gain * motif + spec.bias
              + spec.pattern_amp * background(spec.pattern, manifest.side)
              + spec.noise * eps)
    return styled, motif


def strip_style(image: np.ndarray, spec: DomainSpec) -> np.ndarray:
    """Invert the affine style and background of a noise-free image."""
    return (image - spec.bias - spec.pattern_amp * background(spec.pattern, image.shape[-1])) / spec.gain


@dataclass
class DomainDataset:
    manifest: DatasetManifest
    specs: tuple[DomainSpec, ...]
    images: np.ndarray  # (n, side, side)
    labels: np.ndarray  # (n,) int64
    domains: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, mask_or_index) -> "DomainDataset":
        sel = np.asarray(mask_or_index)
        return DomainDataset(self.manifest, self.specs, self.images[sel],
                             self.labels[sel], self.domains[sel])

    def only_domains(self, domains: Sequence[int]) -> "DomainDataset":
        return self.subset(np.isin(self.domains, np.asarray(list(domains), dtype=np.int64)))

    def without_domain(self, domain: int) -> "DomainDataset":
        return self.subset(self.domains != domain)


def generate(manifest: DatasetManifest, specs: Sequence[DomainSpec] | None = None) -> DomainDataset:
    manifest.validate()
    specs = tuple(specs) if specs is not None else tuple(default_domain_specs(manifest.n_domains))
    if len(specs) != manifest.n_domains:
        raise ValueError(f"{len(specs)} domain specs for {manifest.n_domains} domains")
    for d, s in enumerate(specs):
        s.validate()
        if s.domain_id != d:
            raise ValueError(f"domain spec {d} carries id {s.domain_id}")
    n = manifest.n_domains * manifest.per_domain
    images = np.empty((n, manifest.side, manifest.side))
    labels = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    k = 0
    for d, spec in enumerate(specs):
        for i in range(manifest.per_domain):
            label = i % manifest.n_classes
            img, _ = render_sample(manifest, spec, label, derive_seed(manifest.seed, "sample", d, i))
            images[k] = img
            labels[k] = label
            domains[k] = d
            k += 1
    return DomainDataset(manifest, specs, images, labels, domains)


def split_train_val(dataset: DomainDataset, fraction: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Per-domain random split; ``round(fraction * n_d)`` samples of each domain go to validation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    val_mask = np.zeros(len(dataset), dtype=bool)
    for d in np.unique(dataset.domains):
        where = np.flatnonzero(dataset.domains == d)
        perm = Rng(derive_seed(seed, "split", int(d))).permutation(where.size)
        n_val = int(round(fraction * where.size))
        val_mask[where[perm[:n_val]]] = True
    if val_mask.all() or not val_mask.any():
        raise ValueError("split produced an empty side")
    return dataset.subset(~val_mask), dataset.subset(val_mask)


def batches(dataset: DomainDataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled pass over the dataset; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = Rng(epoch_seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield dataset.images[sel], dataset.labels[sel]


# -- file format ---------------------------------------------------------
# little-endian throughout
#   header:  b"DDGDATA\0", u32 version, u64 seed, u32 n_classes, u32 n_domains,
#            u32 per_domain, u32 side, u32 patch
#   specs:   n_domains x (u32 id, f64 gain, f64 bias, f64 noise, u32 pattern, f64 pattern_amp)
#   body:    u64 n_samples, then per sample: u8 label, u8 domain, side*side f64 pixels

DATA_MAGIC = b"DDGDATA\0"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIQIIIII")
_SPEC = struct.Struct("<IdddId")


def dataset_to_bytes(ds: DomainDataset) -> bytes:
    m = ds.manifest
    parts = [_HEADER.pack(DATA_MAGIC, DATA_VERSION, m.seed, m.n_classes, m.n_domains,
                          m.per_domain, m.side, m.patch)]
    for s in ds.specs:
        parts.append(_SPEC.pack(s.domain_id, s.gain, s.bias, s.noise, s.pattern, s.pattern_amp))
    parts.append(struct.pack("<Q", len(ds)))
    rec = np.dtype([("label", "u1"), ("domain", "u1"), ("pix", "<f8", (m.side * m.side,))])
    body = np.empty(len(ds), dtype=rec)
    body["label"] = ds.labels
    body["domain"] = ds.domains
    body["pix"] = ds.images.reshape(len(ds), -1)
    parts.append(body.tobytes())
    return b"".join(parts)


def dataset_from_bytes(raw: bytes) -> DomainDataset:
    magic, version, seed, c, mdom, per, side, patch = _HEADER.unpack_from(raw, 0)
    if magic != DATA_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    if version != DATA_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    manifest = DatasetManifest(seed, c, mdom, per, side, patch)
    off = _HEADER.size
    specs = []
    for _ in range(mdom):
        specs.append(DomainSpec(*_SPEC.unpack_from(raw, off)))
        off += _SPEC.size
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    rec = np.dtype([("label", "u1"), ("domain", "u1"), ("pix", "<f8", (side * side,))])
    body = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    if off + body.nbytes != len(raw):
        raise ValueError("dataset file has trailing or missing bytes")
    return DomainDataset(manifest, tuple(specs),
                         body["pix"].astype(np.float64).reshape(n, side, side),
                         body["label"].astype(np.int64), body["domain"].astype(np.int64))


def save_dataset(ds: DomainDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> DomainDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
