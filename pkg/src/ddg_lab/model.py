"""Patch encoder, quantized classifier head, teacher EMA and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebook import Codebook, QuantizeResult, quantize
from .rng import Rng


@dataclass
class ModelParams:
    """Shared per-patch MLP encoder and a linear head on mean-pooled codewords.

    ``encoder`` is a list of (weight, bias) pairs; relu follows every layer
    except the last, whose output is the d_c-wide feature.
    """

    encoder: list[tuple[Tensor, Tensor]]
    head: tuple[Tensor, Tensor]

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1][0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.head[0].shape[0]

    @property
    def patch_dim(self) -> int:
        return self.encoder[0][0].shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.encoder):
            out += [(f"encoder.{i}.weight", w), (f"encoder.{i}.bias", b)]
        out += [("head.weight", self.head[0]), ("head.bias", self.head[1])]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        def dup(t):
            return Tensor(t.data.copy(), requires_grad=requires_grad)
        return ModelParams([(dup(w), dup(b)) for w, b in self.encoder],
                           (dup(self.head[0]), dup(self.head[1])))


def init_params(seed: int, patch_dim: int, feature_dim: int = 16, n_classes: int = 5,
                hidden: tuple[int, ...] = (32,)) -> ModelParams:
    """He-normal weights, zero biases, all drawn from one seeded stream."""
    rng = Rng(seed)
    widths = (patch_dim, *hidden, feature_dim)
    encoder = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(fan_out * fan_in, std=np.sqrt(2.0 / fan_in)).reshape(fan_out, fan_in)
        encoder.append((Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
    w = rng.normal(n_classes * feature_dim, std=np.sqrt(1.0 / feature_dim)).reshape(n_classes, feature_dim)
    head = (Tensor(w, requires_grad=True), Tensor(np.zeros(n_classes), requires_grad=True))
    return ModelParams(encoder, head)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, g*p, g*p) -> (B, g, g, p*p), patches flattened row-major."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    b, h, w = images.shape
    if h != w or h % patch:
        raise ValueError(f"image of side {h}x{w} is not divisible into {patch}x{patch} patches")
    g = h // patch
    return images.reshape(b, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(b, g, g, patch * patch)


def encode(images: np.ndarray, params: ModelParams, patch: int) -> Tensor:
    """Feature grid of shape (B, g, g, d_c)."""
    patches = patchify(images, patch)
    b, g, _, pp = patches.shape
    if pp != params.patch_dim:
        raise ad.ShapeError(f"patch has {pp} pixels, encoder expects {params.patch_dim}")
    h = Tensor(patches.reshape(b * g * g, pp))
    last = len(params.encoder) - 1
    for i, (w, bias) in enumerate(params.encoder):
        h = ad.affine(h, w, bias)
        if i < last:
            h = ad.relu(h)
    return ad.reshape(h, (b, g, g, params.feature_dim))


def classify(zq: Tensor, params: ModelParams) -> Tensor:
    """Mean-pool the grid, then an affine map to class logits; returns (B, C)."""
    if zq.data.ndim == 3:
        zq = ad.reshape(zq, (1, *zq.shape))
    if zq.shape[-1] != params.feature_dim:
        raise ad.ShapeError(f"feature width {zq.shape[-1]} != head input {params.feature_dim}")
    pooled = ad.mean(zq, axis=(1, 2))
    return ad.affine(pooled, params.head[0], params.head[1])


@dataclass
class Forward:
    logits: Tensor
    features: Tensor
    quant: QuantizeResult | None


def forward(images: np.ndarray, params: ModelParams, cb: Codebook, patch: int) -> Forward:
    z = encode(images, params, patch)
    if not cb.quantizes:
        return Forward(classify(z, params), z, None)
    q = quantize(z, cb)
    return Forward(classify(q.quantized, params), z, q)


def predict(images: np.ndarray, params: ModelParams, cb: Codebook, patch: int,
            chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), chunk):
        out.append(forward(images[start:start + chunk], params, cb, patch).logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 0.1
    eta: float = 0.25
    temperature: float = 10.0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.alpha, self.beta, self.eta) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossTerms:
    total: Tensor
    cla: float
    con: float
    comm: float


def total_loss(student_logits: Tensor, teacher_logits, labels, comm_loss: Tensor | None,
               weights: LossWeights) -> LossTerms:
    """``L_cla + alpha * L_con + beta * L_comm``; the teacher side is constant."""
    weights.validate()
    cla = ad.cross_entropy(student_logits, labels)
    con = ad.kl_consistency(student_logits, teacher_logits, weights.temperature)
    total = ad.add(cla, ad.scale(con, weights.alpha))
    comm_value = 0.0
    if comm_loss is not None:
        total = ad.add(total, ad.scale(comm_loss, weights.beta))
        comm_value = comm_loss.item()
    return LossTerms(total, cla.item(), con.item(), comm_value)


@dataclass
class TeacherState:
    params: ModelParams
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("teacher decay must lie in [0, 1)")


def make_teacher(student: ModelParams, decay: float = 0.999) -> TeacherState:
    return TeacherState(student.copy(requires_grad=False), decay)


def teacher_ema_update(teacher: TeacherState, student: ModelParams) -> None:
    """``teacher <- decay * teacher + (1 - decay) * student`` for every parameter."""
    pairs = list(zip(teacher.params.named_parameters(), student.named_parameters()))
    for (name_t, t), (name_s, s) in pairs:
        if name_t != name_s or t.shape != s.shape:
            raise ad.ShapeError(f"teacher/student mismatch at {name_t} vs {name_s}")
    d = teacher.decay
    for (_, t), (_, s) in pairs:
        t.data = d * t.data + (1.0 - d) * s.data
