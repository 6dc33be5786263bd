"""Masking, pseudo-labels, codebook EMA and the encoder loss."""

import numpy as np
import pytest

from flowdistill import autodiff as ad
from flowdistill import encoder as enc
from flowdistill.autodiff import Tensor

from helpers import numeric_gradient

RNG = np.random.default_rng(11)


def spec(indices, L=None):
    idx = np.asarray(indices, dtype=np.int64)
    return enc.MaskSpec(indices=idx, starts=idx[:1], prob=0.1, span=1)


# ---------------------------------------------------------------------------
# mask sampling


def test_mask_prob_one_limit_covers_everything():
    m = enc.sample_mask(50, 1.0 - 1e-12, 1, np.random.default_rng(0))
    assert m.indices.tolist() == list(range(50))


def test_mask_spans_clip_at_length():
    for seed in range(20):
        m = enc.sample_mask(30, 0.2, 10, np.random.default_rng(seed))
        assert m.indices.max() < 30
        assert m.indices.min() >= 0


def test_mask_never_empty():
    for seed in range(50):
        m = enc.sample_mask(5, 1e-9, 3, np.random.default_rng(seed))
        assert len(m) >= 1


def test_mask_coverage_matches_analytic_rate():
    # Monte-Carlo oracle: per-frame coverage is 1 - (1-p)^s away from edges
    p, s, L = 0.08, 10, 10_000
    expected = 1.0 - (1.0 - p) ** s
    rng = np.random.default_rng(123)
    cover = np.mean([len(enc.sample_mask(L, p, s, rng)) / L for _ in range(100)])
    assert abs(cover - expected) < 0.02


def test_mask_parameter_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        enc.sample_mask(10, 0.0, 1, rng)
    with pytest.raises(ValueError):
        enc.sample_mask(10, 1.0, 1, rng)
    with pytest.raises(ValueError):
        enc.sample_mask(10, 0.5, 0, rng)


# ---------------------------------------------------------------------------
# mask application


def test_apply_mask_empty_is_identity():
    x = Tensor(RNG.standard_normal((6, 3)))
    emb = Tensor(RNG.standard_normal(3))
    out = enc.apply_mask(x, spec([]), emb)
    np.testing.assert_array_equal(out.data, x.data)


def test_apply_mask_full_replaces_every_row():
    x = Tensor(RNG.standard_normal((4, 3)))
    emb = Tensor(np.array([1.0, 2.0, 3.0]))
    out = enc.apply_mask(x, spec(range(4)), emb)
    np.testing.assert_array_equal(out.data, np.tile(emb.data, (4, 1)))


def test_apply_mask_untouched_rows_bit_identical():
    x = Tensor(RNG.standard_normal((8, 5)))
    emb = Tensor(RNG.standard_normal(5))
    out = enc.apply_mask(x, spec([2, 3]), emb)
    kept = [0, 1, 4, 5, 6, 7]
    assert np.array_equal(out.data[kept], x.data[kept])


def test_apply_mask_gradient_reaches_embedding():
    x = Tensor(RNG.standard_normal((5, 3)))
    emb = Tensor(RNG.standard_normal(3), requires_grad=True)
    m = spec([1, 4])

    def loss():
        return ad.sumsq(enc.apply_mask(x, m, emb))

    grads = ad.backward(loss())
    fd = numeric_gradient(lambda: loss().item(), emb.data)
    np.testing.assert_allclose(grads[emb], fd, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# pseudo-labels


def make_codebook(codes, decay=0.9):
    codes = np.asarray(codes, dtype=np.float64)
    return enc.Codebook(
        sums=codes.copy(), counts=np.ones(len(codes)), codes=codes.copy(), decay=decay
    )


def test_nearest_codeword_label():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    labels = cb.assign(np.array([[0.1, 0.1]]))
    assert labels.tolist() == [0]


def test_equidistant_tie_breaks_to_lowest_index():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    labels = cb.assign(np.array([[0.5, 0.5]]))
    assert labels.tolist() == [0]


def test_labels_invariant_to_far_unused_codewords():
    z = RNG.standard_normal((20, 4))
    near = RNG.standard_normal((8, 4))
    far = near + 1e6
    a = make_codebook(near).assign(z)
    b = make_codebook(np.vstack([near, far])).assign(z)
    np.testing.assert_array_equal(a, b)


def test_labels_invariant_to_common_shift():
    z = RNG.standard_normal((30, 4))
    codes = RNG.standard_normal((6, 4))
    c = RNG.standard_normal(4)
    a = make_codebook(codes).assign(z)
    b = make_codebook(codes + c).assign(z + c)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# codebook EMA updates (hand-evaluated)


def test_codebook_update_single_assignment():
    cb = enc.Codebook(
        sums=np.array([[0.0]]), counts=np.array([1.0]), codes=np.array([[0.0]]), decay=0.9
    )
    cb.update(np.array([[1.0]]), np.array([0]))
    np.testing.assert_allclose(cb.sums, [[0.1]], atol=1e-15)
    np.testing.assert_allclose(cb.counts, [1.0], atol=1e-15)
    np.testing.assert_allclose(cb.codes, [[0.1]], atol=1e-15)


def test_codebook_update_two_assignments():
    cb = enc.Codebook(
        sums=np.array([[0.0]]), counts=np.array([1.0]), codes=np.array([[0.0]]), decay=0.9
    )
    cb.update(np.array([[1.0], [3.0]]), np.array([0, 0]))
    np.testing.assert_allclose(cb.sums, [[0.4]], atol=1e-15)
    np.testing.assert_allclose(cb.counts, [1.1], atol=1e-15)
    np.testing.assert_allclose(cb.codes, [[0.4 / 1.1]], atol=1e-15)


def test_codebook_update_decay_one_freezes():
    cb = make_codebook(RNG.standard_normal((4, 3)), decay=1.0)
    before = cb.codes.copy()
    cb.update(RNG.standard_normal((10, 3)), RNG.integers(0, 4, 10))
    np.testing.assert_array_equal(cb.codes, before)


def test_codebook_unassigned_codewords_keep_position():
    cb = make_codebook(RNG.standard_normal((4, 3)))
    before = cb.codes.copy()
    cb.update(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    np.testing.assert_allclose(cb.codes, before, atol=1e-12)
    assert np.all(cb.counts > 0)


def test_codebook_ratio_invariant_after_random_updates():
    rng = np.random.default_rng(5)
    cb = enc.Codebook.init(8, 4, 0.9, rng, dtype=np.float64)
    for _ in range(50):
        pts = rng.standard_normal((16, 4))
        cb.update(pts, cb.assign(pts))
        np.testing.assert_allclose(cb.codes, cb.sums / cb.counts[:, None], atol=1e-12)


def test_codebook_init_counts_start_at_one():
    cb = enc.Codebook.init(16, 8, 0.9, np.random.default_rng(0), dtype=np.float64)
    np.testing.assert_array_equal(cb.counts, np.ones(16))
    np.testing.assert_array_equal(cb.codes, cb.sums)


# ---------------------------------------------------------------------------
# encoder loss


def test_uniform_heads_give_log_vocab():
    V, d, L = 16, 8, 10
    z = Tensor(RNG.standard_normal((L, d)))
    heads = [(Tensor(np.zeros((d, V))), Tensor(np.zeros(V)))] * 2
    labels = [RNG.integers(0, V, L) for _ in range(2)]
    loss = enc.encoder_loss(z, heads, labels, spec([0, 3, 7]))
    assert loss.item() == pytest.approx(np.log(V), abs=1e-12)


def test_confident_heads_give_zero_loss():
    V, d, L = 8, 4, 6
    z = Tensor(RNG.standard_normal((L, d)))
    y = np.full(L, 3)
    b = np.zeros(V)
    b[3] = 1e4
    heads = [(Tensor(np.zeros((d, V))), Tensor(b))]
    loss = enc.encoder_loss(z, heads, [y], spec([1, 2]))
    assert loss.item() == 0.0


def test_loss_ignores_unmasked_frames():
    V, d, L = 8, 4, 9
    zdata = RNG.standard_normal((L, d))
    heads = [
        (Tensor(RNG.standard_normal((d, V))), Tensor(RNG.standard_normal(V))) for _ in range(2)
    ]
    labels = [RNG.integers(0, V, L) for _ in range(2)]
    m = spec([2, 5])
    base = enc.encoder_loss(Tensor(zdata), heads, labels, m).item()
    perturbed = zdata.copy()
    perturbed[[0, 1, 3, 4, 6, 7, 8]] += RNG.standard_normal((7, d))
    after = enc.encoder_loss(Tensor(perturbed), heads, labels, m).item()
    assert after == base


def test_single_layer_loss_matches_direct_formula():
    V, d = 5, 3
    z = RNG.standard_normal((6, d))
    w = RNG.standard_normal((d, V))
    b = RNG.standard_normal(V)
    y = RNG.integers(0, V, 6)
    m = spec([1, 4, 5])
    loss = enc.encoder_loss(Tensor(z), [(Tensor(w), Tensor(b))], [y], m).item()
    # independent evaluation of the masked cross entropy
    logits = z @ w + b
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -np.mean([logp[i, y[i]] for i in m.indices])
    assert loss == pytest.approx(expected, rel=1e-12)


def test_empty_mask_is_an_error():
    z = Tensor(RNG.standard_normal((4, 3)))
    heads = [(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))]
    with pytest.raises(ValueError, match="empty mask"):
        enc.encoder_loss(z, heads, [np.zeros(4, dtype=int)], spec([]))


# ---------------------------------------------------------------------------
# teacher EMA


def teacher_with(start, end, ramp, value=0.0):
    student = {"w": Tensor(np.full(3, 1.0), requires_grad=True)}
    teacher = enc.TeacherState.from_student(student, start, end, ramp)
    teacher.params["w"].data = np.full(3, value)
    return student, teacher


def test_teacher_starts_as_student_copy():
    student = {"w": Tensor(RNG.standard_normal(4), requires_grad=True)}
    teacher = enc.TeacherState.from_student(student, 0.9997, 1.0, 10)
    np.testing.assert_array_equal(teacher.params["w"].data, student["w"].data)
    assert not teacher.params["w"].requires_grad


def test_ema_gamma_zero_copies_student():
    student, teacher = teacher_with(0.0, 0.0, 1)
    enc.ema_update(teacher, student, step=0)
    np.testing.assert_array_equal(teacher.params["w"].data, student["w"].data)


def test_ema_gamma_one_freezes_teacher():
    student, teacher = teacher_with(1.0, 1.0, 1)
    enc.ema_update(teacher, student, step=5)
    np.testing.assert_array_equal(teacher.params["w"].data, np.zeros(3))


def test_ema_first_step_hand_value():
    student, teacher = teacher_with(0.9997, 1.0, 1000)
    enc.ema_update(teacher, student, step=0)
    np.testing.assert_allclose(teacher.params["w"].data, np.full(3, 0.0003), atol=1e-15)


def test_ema_schedule_monotone_and_saturating():
    _, teacher = teacher_with(0.9997, 1.0, 100)
    gammas = [teacher.gamma(s) for s in range(0, 301, 10)]
    assert all(b >= a for a, b in zip(gammas, gammas[1:]))
    assert teacher.gamma(0) == 0.9997
    assert teacher.gamma(100) == 1.0
    assert teacher.gamma(250) == 1.0


def test_teacher_receives_no_gradient():
    student = {"w": Tensor(RNG.standard_normal((3, 3)), requires_grad=True)}
    teacher = enc.TeacherState.from_student(student, 0.999, 1.0, 10)
    with ad.no_grad():
        t_out = ad.matmul(Tensor(RNG.standard_normal((2, 3))), teacher.params["w"])
    assert t_out._parents == ()
    loss = ad.sumsq(ad.matmul(Tensor(t_out.data), student["w"]))
    grads = ad.backward(loss, leaves=[student["w"], teacher.params["w"]])
    np.testing.assert_array_equal(grads[teacher.params["w"]], np.zeros((3, 3)))
