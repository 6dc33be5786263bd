"""Conditional-path construction, the field regression loss, time
sampling and decoder conditioning."""

import numpy as np
import pytest

from flowdistill import autodiff as ad
from flowdistill import decoder as dec
from flowdistill import encoder as enc
from flowdistill import transformer as tfm
from flowdistill.autodiff import ShapeError, Tensor
from flowdistill.model import JointModel, ModelConfig

RNG = np.random.default_rng(21)


def spec(indices):
    idx = np.asarray(indices, dtype=np.int64)
    return enc.MaskSpec(indices=idx, starts=idx[:1], prob=0.1, span=1)


# ---------------------------------------------------------------------------
# OT conditional path


def test_ot_path_starts_at_noise():
    x0, x1 = RNG.standard_normal((5, 3)), RNG.standard_normal((5, 3))
    fs = dec.ot_path(x0, x1, 0.0, 1e-5)
    np.testing.assert_array_equal(fs.phi, x0)


def test_ot_path_ends_near_data():
    x0, x1 = RNG.standard_normal((5, 3)), RNG.standard_normal((5, 3))
    s = 1e-5
    fs = dec.ot_path(x0, x1, 1.0, s)
    np.testing.assert_allclose(fs.phi, s * x0 + x1, atol=1e-15)
    assert np.linalg.norm(fs.phi - x1) <= s * np.linalg.norm(x0) + 1e-15


def test_ot_path_degenerate_sigma_one():
    x0, x1 = RNG.standard_normal((4, 2)), RNG.standard_normal((4, 2))
    t = 0.37
    fs = dec.ot_path(x0, x1, t, 1.0)
    np.testing.assert_allclose(fs.phi, x0 + t * x1, atol=1e-15)
    np.testing.assert_allclose(fs.u, x1, atol=1e-15)


def test_ot_path_validates_inputs():
    x = RNG.standard_normal((3, 2))
    with pytest.raises(ValueError, match="t must"):
        dec.ot_path(x, x, 1.5, 1e-5)
    with pytest.raises(ValueError, match="sigma_min"):
        dec.ot_path(x, x, 0.5, 0.0)
    with pytest.raises(ShapeError):
        dec.ot_path(x, RNG.standard_normal((4, 2)), 0.5, 1e-5)


def test_path_derivative_equals_target_field():
    # (phi(t+h) - phi(t-h)) / 2h matches u for the linear path
    x0, x1 = RNG.standard_normal((6, 4)), RNG.standard_normal((6, 4))
    s, h = 1e-5, 1e-5
    for t in (0.1, 0.5, 0.9):
        fp = dec.ot_path(x0, x1, t + h, s).phi
        fm = dec.ot_path(x0, x1, t - h, s).phi
        np.testing.assert_allclose((fp - fm) / (2 * h), dec.ot_path(x0, x1, t, s).u, atol=1e-8)


# ---------------------------------------------------------------------------
# time sampling


def test_uniform_time_mean():
    rng = np.random.default_rng(0)
    draws = [dec.sample_time(rng, "uniform") for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_logit_normal_median():
    rng = np.random.default_rng(1)
    draws = [dec.sample_time(rng, "logit-normal") for _ in range(100_000)]
    assert abs(np.median(draws) - 0.5) < 0.01


def test_time_draws_strictly_inside_unit_interval():
    rng = np.random.default_rng(2)
    for mode in dec.TIME_MODES:
        for _ in range(2000):
            t = dec.sample_time(rng, mode)
            assert 0.0 < t < 1.0


def test_unknown_time_mode():
    with pytest.raises(ValueError, match="mode"):
        dec.sample_time(np.random.default_rng(0), "cosine")


# ---------------------------------------------------------------------------
# timestep embedding and decoder forward


def test_timestep_embedding_separates_times():
    a = dec.timestep_embedding(0.25, 32, np.float64)
    b = dec.timestep_embedding(0.26, 32, np.float64)
    assert a.shape == (32,)
    assert np.abs(a - b).max() > 1e-4


def tiny_model(precision="f64"):
    cfg = ModelConfig(
        d_x=3,
        encoder=tfm.BlockConfig(d=8, heads=2, ffn=8, layers=2, conv_kernel=3, conv_groups=2),
        decoder=tfm.BlockConfig(d=8, heads=2, ffn=8, layers=2, use_unet_skips=True),
        vocab=4,
        n_targets=2,
        teacher_ramp=10,
        n_phones=4,
        precision=precision,
    )
    return JointModel.create(cfg, np.random.default_rng(3))


def test_decoder_output_drops_timestep_token():
    model = tiny_model()
    phi = RNG.standard_normal((7, 3))
    out = dec.decoder_forward(Tensor(phi), 0.3, None, model.params, model.cfg.decoder)
    assert out.shape == (7, 3)


def test_zero_conditioning_projections_decouple_encoder():
    model = tiny_model()
    for i in range(model.cfg.encoder.layers):
        model.params[f"cond.w{i}"].data[:] = 0.0
    phi = RNG.standard_normal((5, 3))
    layers_a = model.student_layers(RNG.standard_normal((5, 3)))
    layers_b = model.student_layers(RNG.standard_normal((5, 3)))
    za, zb = model.condition(layers_a), model.condition(layers_b)
    out_a = dec.decoder_forward(Tensor(phi), 0.5, za, model.params, model.cfg.decoder)
    out_b = dec.decoder_forward(Tensor(phi), 0.5, zb, model.params, model.cfg.decoder)
    np.testing.assert_array_equal(out_a.data, out_b.data)


def test_decoder_is_time_sensitive():
    model = tiny_model()
    phi = RNG.standard_normal((5, 3))
    out_a = dec.decoder_forward(Tensor(phi), 0.2, None, model.params, model.cfg.decoder)
    out_b = dec.decoder_forward(Tensor(phi), 0.8, None, model.params, model.cfg.decoder)
    assert np.abs(out_a.data - out_b.data).max() > 1e-8


def test_missing_projection_fails():
    model = tiny_model()
    layers = model.student_layers(RNG.standard_normal((4, 3)))
    del model.params["cond.w1"]
    with pytest.raises(KeyError, match="cond.w1"):
        model.condition(layers)


# ---------------------------------------------------------------------------
# CFM loss


def test_cfm_loss_zero_when_exact():
    x0, x1 = RNG.standard_normal((6, 3)), RNG.standard_normal((6, 3))
    fs = dec.ot_path(x0, x1, 0.4, 1e-5)
    loss = dec.cfm_loss(Tensor(fs.u.copy()), fs, spec([0, 2, 5]))
    assert loss.item() == 0.0


def test_cfm_loss_unit_offset():
    x0, x1 = RNG.standard_normal((6, 3)), RNG.standard_normal((6, 3))
    fs = dec.ot_path(x0, x1, 0.4, 1e-5)
    loss = dec.cfm_loss(Tensor(fs.u + 1.0), fs, spec([1, 3]))
    assert loss.item() == pytest.approx(1.0, abs=1e-12)


def test_cfm_loss_ignores_unmasked_frames():
    x0, x1 = RNG.standard_normal((8, 3)), RNG.standard_normal((8, 3))
    fs = dec.ot_path(x0, x1, 0.6, 1e-5)
    m = spec([2, 4])
    v = fs.u + RNG.standard_normal(fs.u.shape)
    base = dec.cfm_loss(Tensor(v), fs, m).item()
    v2 = v.copy()
    v2[[0, 1, 3, 5, 6, 7]] += 100.0
    assert dec.cfm_loss(Tensor(v2), fs, m).item() == base


def test_cfm_loss_empty_mask_fails():
    x = RNG.standard_normal((4, 2))
    fs = dec.ot_path(x, x, 0.5, 1e-5)
    with pytest.raises(ValueError, match="empty"):
        dec.cfm_loss(Tensor(fs.u), fs, spec([]))


# ---------------------------------------------------------------------------
# end-to-end coupling through the conditioning


def joint_losses(model, zero_cond=False):
    if zero_cond:
        for i in range(model.cfg.encoder.layers):
            model.params[f"cond.w{i}"].data[:] = 0.0
    x = np.random.default_rng(8).standard_normal((6, 3))
    m = spec([1, 2, 4])
    student = model.student_layers(x, mask=m)
    x0 = np.random.default_rng(9).standard_normal((6, 3))
    fs = dec.ot_path(x0, x, 0.5, 1e-5)
    v = dec.decoder_forward(
        Tensor(fs.phi), 0.5, model.condition(student), model.params, model.cfg.decoder
    )
    return dec.cfm_loss(v, fs, m)


def test_decoder_loss_reaches_encoder_weights():
    model = tiny_model()
    loss = joint_losses(model)
    grads = ad.backward(loss, leaves=model.params.values())
    g = grads[model.params["enc.block0.attn.wq"]]
    assert np.abs(g).max() > 0.0


def test_decoder_loss_blocked_by_zero_projections():
    model = tiny_model()
    loss = joint_losses(model, zero_cond=True)
    grads = ad.backward(loss, leaves=model.params.values())
    g = grads[model.params["enc.block0.attn.wq"]]
    np.testing.assert_array_equal(g, 0.0)


def test_total_objective_matches_weighted_parts():
    model = tiny_model()
    x = RNG.standard_normal((6, 3))
    m = spec([0, 3])
    teacher_outs = model.teacher_layers(x)
    labels = enc.teacher_labels(model.target_layers(teacher_outs), model.codebooks)
    student = model.student_layers(x, mask=m)
    e_loss = enc.encoder_loss(student[-1], model.heads(), labels, m)
    x0 = RNG.standard_normal((6, 3))
    fs = dec.ot_path(x0, x, 0.7, 1e-5)
    v = dec.decoder_forward(
        Tensor(fs.phi), 0.7, model.condition(student), model.params, model.cfg.decoder
    )
    d_loss = dec.cfm_loss(v, fs, m)
    total = e_loss + d_loss * 0.25
    assert abs(total.item() - (e_loss.item() + 0.25 * d_loss.item())) <= 1e-12
