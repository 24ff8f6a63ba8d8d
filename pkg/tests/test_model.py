import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddg_lab import autodiff as ad
from ddg_lab.autodiff import Tensor
from ddg_lab.codebook import Codebook, commitment_loss, init_codebook
from ddg_lab.model import (LossWeights, ModelParams, TeacherState, classify, encode, forward,
                           init_params, make_teacher, patchify, teacher_ema_update, total_loss)
from ddg_lab.rng import Rng
from helpers import central_diff, max_rel_err, reference_loss

PATCH = 3


def setup(seed=0, b=4, side=6, d=3, n_classes=3):
    rng = Rng(seed)
    params = init_params(seed, PATCH * PATCH, feature_dim=d, n_classes=n_classes, hidden=(5,))
    images = rng.uniform(b * side * side).reshape(b, side, side)
    labels = np.arange(b) % n_classes
    return params, images, labels


def as_arrays(params: ModelParams):
    return ([(w.data, b.data) for w, b in params.encoder], (params.head[0].data, params.head[1].data))


def student_objective(params, images, labels, teacher_logits, cb, weights):
    out = forward(images, params, cb, PATCH)
    comm = commitment_loss(out.features, out.quant.quantized) if out.quant else None
    return total_loss(out.logits, teacher_logits, labels, comm, weights), out


# -- encode / classify ----------------------------------------------------

def test_patchify_layout():
    img = np.arange(16.0).reshape(4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 2, 2, 4)
    assert p[0, 0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_encode_rejects_indivisible_images():
    params = init_params(0, 9, 2, 2)
    with pytest.raises(ValueError):
        encode(np.zeros((1, 7, 7)), params, 3)


def test_zero_encoder_gives_zero_features():
    params, images, _ = setup()
    for w, b in params.encoder:
        w.data[:] = 0.0
        b.data[:] = 0.0
    assert not encode(images, params, PATCH).data.any()


def test_constant_image_gives_equal_patch_features():
    params, _, _ = setup()
    z = encode(np.full((1, 6, 6), 0.7), params, PATCH).data[0]
    assert np.array_equal(z, np.broadcast_to(z[0, 0], z.shape))


def test_classify_examples():
    params, _, _ = setup()
    rng = Rng(1)
    cell = rng.normal(3)
    grid = np.broadcast_to(cell, (1, 2, 2, 3)).copy()
    single = classify(Tensor(cell.reshape(1, 1, 1, 3)), params).data
    assert np.allclose(classify(Tensor(grid), params).data, single, rtol=0, atol=1e-15)
    zq = rng.normal(2 * 2 * 3).reshape(1, 2, 2, 3)
    perm = zq.reshape(1, 4, 3)[:, [2, 0, 3, 1]].reshape(1, 2, 2, 3)
    assert np.allclose(classify(Tensor(zq), params).data, classify(Tensor(perm), params).data, atol=1e-15)
    params.head[0].data[:] = 0.0
    assert not classify(Tensor(zq), params).data.any()


def test_forward_is_bitwise_deterministic():
    params, images, _ = setup(3)
    cb = init_codebook(6, 3, 1)
    a = forward(images, params, cb, PATCH).logits.data.tobytes()
    b = forward(images, params, cb, PATCH).logits.data.tobytes()
    assert a == b


# -- objective ------------------------------------------------------------

def test_unquantized_pipeline_matches_reference():
    params, images, labels = setup(5)
    cb = init_codebook(4, 3, 0, mode="none")
    teacher_logits = Rng(2).normal(4 * 3).reshape(4, 3)
    w = LossWeights()
    terms, _ = student_objective(params, images, labels, teacher_logits, cb, w)
    enc, head = as_arrays(params)
    ref, _ = reference_loss(images, enc, head, PATCH, labels, teacher_logits, beta=0.0)
    assert abs(terms.total.item() - ref) <= 1e-12
    plain = total_loss(forward(images, params, cb, PATCH).logits, teacher_logits, labels, None,
                       LossWeights(alpha=0.0, beta=0.0))
    ref_ce, _ = reference_loss(images, enc, head, PATCH, labels)
    assert abs(plain.total.item() - ref_ce) <= 1e-12
    assert plain.total.item() == plain.cla


def test_quantized_pipeline_matches_reference():
    params, images, labels = setup(6)
    cb = init_codebook(8, 3, 2)
    teacher_logits = Rng(4).normal(12).reshape(4, 3)
    terms, _ = student_objective(params, images, labels, teacher_logits, cb, LossWeights())
    enc, head = as_arrays(params)
    ref, _ = reference_loss(images, enc, head, PATCH, labels, teacher_logits, codewords=cb.codewords.data)
    assert abs(terms.total.item() - ref) <= 1e-12


def test_full_student_gradients_match_finite_differences():
    params, images, labels = setup(8)
    cb = init_codebook(8, 3, 3)
    teacher_logits = Rng(9).normal(12).reshape(4, 3)
    w = LossWeights(alpha=2.0, beta=0.1, temperature=10.0)
    terms, out = student_objective(params, images, labels, teacher_logits, cb, w)
    ad.backward(terms.total)
    z0, zq0 = out.features.data, out.quant.quantized.data
    enc, head = as_arrays(params)
    enc = [(wt.copy(), b.copy()) for wt, b in enc]
    head = (head[0].copy(), head[1].copy())
    slots = [p for layer in enc for p in layer] + list(head)

    def objective(k):
        def f(v):
            saved = slots[k].copy()
            slots[k][...] = v
            val, _ = reference_loss(images, enc, head, PATCH, labels, teacher_logits,
                                    anchor=(z0, zq0), alpha=w.alpha, beta=w.beta,
                                    temperature=w.temperature)
            slots[k][...] = saved
            return val
        return f

    worst = 0.0
    for k, (name, p) in enumerate(params.named_parameters()):
        numeric = central_diff(objective(k), slots[k].copy(), 1e-5)
        worst = max(worst, max_rel_err(p.grad, numeric, floor=1e-6))
    assert worst < 1e-4


def test_head_gradient_through_real_quantizer():
    # small head perturbations leave the assignment untouched, so plain FD applies
    params, images, labels = setup(10)
    cb = init_codebook(8, 3, 5)
    teacher_logits = Rng(1).normal(12).reshape(4, 3)
    terms, _ = student_objective(params, images, labels, teacher_logits, cb, LossWeights())
    ad.backward(terms.total)
    enc, head = as_arrays(params)
    wh = head[0].copy()

    def f(v):
        val, _ = reference_loss(images, enc, (v, head[1]), PATCH, labels, teacher_logits,
                                codewords=cb.codewords.data)
        return val
    assert max_rel_err(params.head[0].grad, central_diff(f, wh, 1e-5), floor=1e-6) < 1e-4


def test_teacher_never_receives_gradient():
    params, images, labels = setup(2)
    cb = init_codebook(6, 3, 0)
    teacher = make_teacher(params, 0.999)
    t_logits = forward(images, teacher.params, cb, PATCH).logits
    terms, _ = student_objective(params, images, labels, t_logits, cb, LossWeights())
    ad.backward(terms.total)
    assert all(p.grad is None for p in teacher.params.parameters())
    assert all(p.grad is not None for p in params.parameters())


def test_identical_teacher_gives_zero_consistency():
    params, images, labels = setup(4)
    cb = init_codebook(6, 3, 0)
    out = forward(images, params, cb, PATCH)
    comm = commitment_loss(out.features, out.quant.quantized)
    terms = total_loss(out.logits, out.logits.data, labels, comm, LossWeights())
    assert terms.con == 0.0
    assert terms.total.item() == pytest.approx(terms.cla + 0.1 * terms.comm, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 5.0), st.integers(0, 1000))
def test_total_loss_is_linear_in_weights(alpha, beta, seed):
    rng = Rng(seed)
    s, t = rng.normal(12).reshape(4, 3), rng.normal(12).reshape(4, 3)
    labels = [0, 1, 2, 0]
    comm = Tensor(np.asarray(rng.uniform(1)[0]))

    def value(a, b):
        return total_loss(Tensor(s), t, labels, comm, LossWeights(alpha=a, beta=b)).total.item()
    h = 1e-3
    base = total_loss(Tensor(s), t, labels, comm, LossWeights(alpha=alpha, beta=beta))
    assert abs((value(alpha + h, beta) - value(alpha, beta)) / h - base.con) <= 1e-9
    assert abs((value(alpha, beta + h) - value(alpha, beta)) / h - base.comm) <= 1e-9


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(temperature=0.0).validate()
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0).validate()


# -- teacher --------------------------------------------------------------

def test_teacher_decay_zero_copies_student():
    params, _, _ = setup()
    teacher = make_teacher(init_params(99, 9, 3, 3, (5,)), decay=0.0)
    teacher_ema_update(teacher, params)
    for t, s in zip(teacher.params.parameters(), params.parameters()):
        assert np.array_equal(t.data, s.data)


def test_teacher_decay_one_rejected():
    params, _, _ = setup()
    with pytest.raises(ValueError):
        TeacherState(params.copy(False), 1.0)


def test_teacher_closed_form():
    student, _, _ = setup(1)
    teacher = make_teacher(init_params(7, 9, 3, 3, (5,)), decay=0.999)
    t0 = [p.data.copy() for p in teacher.params.parameters()]
    k = 250
    for _ in range(k):
        teacher_ema_update(teacher, student)
    for t, s, init in zip(teacher.params.parameters(), student.parameters(), t0):
        assert np.allclose(t.data, s.data + 0.999 ** k * (init - s.data), rtol=0, atol=1e-12)


def test_teacher_shape_mismatch():
    params, _, _ = setup()
    teacher = make_teacher(init_params(0, 9, 3, 3, (4,)))
    with pytest.raises(ad.ShapeError):
        teacher_ema_update(teacher, params)


def test_sgd_mode_codebook_takes_no_gradient_from_commitment():
    params, images, labels = setup(3)
    e = Rng(0).normal(18).reshape(6, 3)
    cb = Codebook(Tensor(e), np.ones(6), e.copy(), 0.99, "sgd")
    terms, _ = student_objective(params, images, labels, np.zeros((4, 3)), cb, LossWeights())
    ad.backward(terms.total)
    assert cb.codewords.grad is None
