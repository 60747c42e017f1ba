import math

import mpmath
import numpy as np
import pytest

from mdpo_lab import objectives as O
from mdpo_lab.gradcheck import grad_check
from mdpo_lab.model import MultimodalLM, sequence_log_prob, snapshot_reference
from mdpo_lab.objectives import LogRatioBundle, ObjectiveConfig, ObjectiveError
from mdpo_lab.rng import SeededRng
from mdpo_lab.tensor import Tensor, no_grad

from conftest import jitter, random_batch, tiny_config

LN2 = math.log(2.0)
mpmath.mp.dps = 50


def bundle(lr_w=0.0, lr_l=0.0, lr_img=0.0):
    t = lambda v: None if v is None else Tensor(v)  # noqa: E731
    return LogRatioBundle(t(lr_w), t(lr_l), t(lr_img), Tensor(0.0))


def softplus_hp(x):
    """log(1 + e^x) at 50 significant digits."""
    return mpmath.log1p(mpmath.exp(mpmath.mpf(x)))


def oracle_losses(beta, lw, ll, li, delta, anchor="chosen"):
    b, lw, ll, li, d = (mpmath.mpf(v) for v in (beta, lw, ll, li, delta))
    dpo = softplus_hp(-b * (lw - ll))
    copo = softplus_hp(-b * (lw - li))
    anc = softplus_hp(-(b * lw - d))
    if anchor != "chosen":
        anc += softplus_hp(-(d - b * ll))
    if anchor == "chosen+rejected+image":
        anc += softplus_hp(-(d - b * li))
    return float(dpo), float(copo), float(anc), float(dpo + copo + anc)


# ---------------------------------------------------------------- anchors at policy == reference

def test_zero_ratios_give_ln2_per_term():
    cfg = ObjectiveConfig()
    b = bundle()
    assert O.dpo_loss(b, cfg).item() == pytest.approx(LN2, abs=1e-12)
    assert O.copo_loss(b, cfg).item() == pytest.approx(LN2, abs=1e-12)
    assert O.ancpo_loss(b, cfg).item() == pytest.approx(LN2, abs=1e-12)
    total, parts = O.mdpo_loss(b, cfg)
    assert total.item() == pytest.approx(3 * LN2, abs=1e-12)
    assert set(parts) == {"dpo", "copo", "ancpo"}


@pytest.mark.parametrize("anchor,terms", [("chosen", 1), ("chosen+rejected", 2), ("chosen+rejected+image", 3)])
def test_anchor_variants_at_zero(anchor, terms):
    cfg = ObjectiveConfig(anchor=anchor)
    assert O.ancpo_loss(bundle(), cfg).item() == pytest.approx(terms * LN2, abs=1e-12)
    assert cfg.n_sigma_terms == terms + 2
    assert O.mdpo_loss(bundle(), cfg)[0].item() == pytest.approx(cfg.n_sigma_terms * LN2, abs=1e-12)


def test_chosen_rejected_anchor_is_two_ln2():
    assert O.ancpo_loss(bundle(), ObjectiveConfig(anchor="chosen+rejected")).item() == pytest.approx(1.386294, abs=1e-6)


# ---------------------------------------------------------------- frozen oracle values

def test_dpo_reference_value():
    assert O.dpo_loss(bundle(0.2, -0.5), ObjectiveConfig()).item() == pytest.approx(0.658759, abs=1e-6)


def test_copo_reference_value():
    assert O.copo_loss(bundle(0.2, 0.0, -0.1), ObjectiveConfig()).item() == pytest.approx(0.678259, abs=1e-6)


def test_ancpo_reference_value():
    assert O.ancpo_loss(bundle(0.2), ObjectiveConfig()).item() == pytest.approx(0.683197, abs=1e-6)


def test_mdpo_reference_value_and_breakdown():
    total, parts = O.mdpo_loss(bundle(0.2, -0.5, -0.1), ObjectiveConfig())
    # high-precision sum of the three terms; adding the 6-decimal values gives 2.020215
    assert total.item() == pytest.approx(2.0202164116, abs=1e-9)
    assert parts["dpo"] == pytest.approx(0.658759, abs=1e-6)
    assert parts["copo"] == pytest.approx(0.678259, abs=1e-6)
    assert parts["ancpo"] == pytest.approx(0.683197, abs=1e-6)


def test_oracle_agrees_on_reference_values():
    d, c, a, t = oracle_losses(0.1, 0.2, -0.5, -0.1, 0.0)
    assert np.allclose((d, c, a), (0.658759, 0.678259, 0.683197), atol=1e-6)
    assert t == pytest.approx(2.0202164116167797, abs=1e-15)


@pytest.mark.parametrize("anchor", O.ANCHOR_VARIANTS)
def test_losses_match_high_precision_oracle(anchor):
    rng = SeededRng(2024).split(anchor)
    for _ in range(1000):
        beta = float(rng.uniform(0.01, 2.0))
        lw, ll, li = (float(v) for v in rng.uniform(-60, 60, size=3))
        delta = float(rng.uniform(-5, 5))
        cfg = ObjectiveConfig(beta=beta, delta=delta, anchor=anchor)
        b = bundle(lw, ll, li)
        want = oracle_losses(beta, lw, ll, li, delta, anchor)
        got = (O.dpo_loss(b, cfg).item(), O.copo_loss(b, cfg).item(), O.ancpo_loss(b, cfg).item(),
               O.mdpo_loss(b, cfg)[0].item())
        assert np.allclose(got, want, rtol=0, atol=1e-10), (beta, lw, ll, li, delta, got, want)


# ---------------------------------------------------------------- properties

def test_dpo_monotone_in_margin():
    cfg = ObjectiveConfig()
    vals = [O.dpo_loss(bundle(m, 0.0), cfg).item() for m in np.linspace(-30, 30, 121)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_copo_swap_identity():
    cfg = ObjectiveConfig()
    for x in np.linspace(-8, 8, 17):
        fwd = O.copo_loss(bundle(x, 0.0, 0.0), cfg).item()
        rev = O.copo_loss(bundle(0.0, 0.0, x), cfg).item()
        # swapping m_w and m_l negates the margin: softplus(z) - softplus(-z) = z
        assert rev - fwd == pytest.approx(cfg.beta * x, abs=1e-12)


def test_dpo_shift_invariant_ancpo_not():
    cfg = ObjectiveConfig()
    base = bundle(0.3, -0.4)
    shifted = bundle(0.3 + 5.0, -0.4 + 5.0)
    assert O.dpo_loss(shifted, cfg).item() == pytest.approx(O.dpo_loss(base, cfg).item(), abs=1e-12)
    assert abs(O.ancpo_loss(shifted, cfg).item() - O.ancpo_loss(base, cfg).item()) > 1e-3


def test_losses_nonnegative():
    rng = SeededRng(5)
    for _ in range(200):
        lw, ll, li = rng.uniform(-100, 100, size=3)
        total, parts = O.mdpo_loss(bundle(lw, ll, li), ObjectiveConfig(anchor="chosen+rejected+image"))
        assert total.item() >= 0 and all(v >= 0 for v in parts.values())


def test_breakdown_sums_to_total():
    rng = SeededRng(6)
    for _ in range(100):
        lw, ll, li = rng.uniform(-20, 20, size=3)
        total, parts = O.mdpo_loss(bundle(lw, ll, li), ObjectiveConfig(delta=float(rng.uniform(-1, 1))))
        assert abs(sum(parts.values()) - total.item()) <= 1e-12


def test_no_overflow_at_extreme_arguments():
    cfg = ObjectiveConfig(beta=1.0)
    for m in (-700.0, 700.0):
        b = bundle(m, 0.0, 0.0)
        for loss in (O.dpo_loss(b, cfg), O.copo_loss(b, cfg), O.ancpo_loss(b, cfg)):
            assert math.isfinite(loss.item())
    assert O.dpo_loss(bundle(-700.0, 0.0), cfg).item() == pytest.approx(700.0)


def test_disabling_components_reproduces_dpo():
    b = bundle(0.7, -1.3, 0.2)
    total, parts = O.mdpo_loss(b, ObjectiveConfig(copo=False, ancpo=False))
    assert total.item() == O.dpo_loss(b, ObjectiveConfig()).item()
    assert list(parts) == ["dpo"]


def test_batch_loss_is_mean_of_records():
    cfg = ObjectiveConfig()
    lw, ll = np.array([0.2, -1.0, 3.0]), np.array([0.0, 0.5, -2.0])
    per = [O.dpo_loss(bundle(a, b), cfg).item() for a, b in zip(lw, ll)]
    assert O.dpo_loss(bundle(lw, ll), cfg).item() == pytest.approx(np.mean(per), abs=1e-14)


def test_weights_scale_components():
    b = bundle(0.2, -0.5, -0.1)
    total, parts = O.mdpo_loss(b, ObjectiveConfig(copo_weight=2.0, ancpo_weight=0.5))
    d, c, a, _ = oracle_losses(0.1, 0.2, -0.5, -0.1, 0.0)
    assert parts["copo"] == pytest.approx(2 * c, abs=1e-12)
    assert total.item() == pytest.approx(d + 2 * c + 0.5 * a, abs=1e-12)


# ---------------------------------------------------------------- config and errors

def test_copo_without_rejected_image_raises():
    with pytest.raises(ObjectiveError):
        O.copo_loss(bundle(0.1, 0.0, None), ObjectiveConfig())


def test_image_anchor_without_rejected_image_raises():
    with pytest.raises(ObjectiveError):
        O.ancpo_loss(bundle(0.1, 0.0, None), ObjectiveConfig(anchor="chosen+rejected+image"))


@pytest.mark.parametrize("kw", [dict(beta=0.0), dict(beta=-1.0), dict(dpo=False, copo=False, ancpo=False),
                                dict(anchor="rejected")])
def test_invalid_configs(kw):
    with pytest.raises(ObjectiveError):
        ObjectiveConfig(**kw)


def test_config_round_trip_and_strict_keys():
    cfg = ObjectiveConfig(beta=0.2, anchor="chosen+rejected", copo=False)
    assert ObjectiveConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ObjectiveError):
        ObjectiveConfig.from_dict({"beta": 0.1, "gamma": 1.0})


def test_presets():
    assert ObjectiveConfig.preset("mdpo") == ObjectiveConfig()
    dpo = ObjectiveConfig.preset("dpo")
    assert dpo.dpo and not dpo.copo and not dpo.ancpo and not dpo.needs_rejected_image
    with pytest.raises(ObjectiveError):
        ObjectiveConfig.preset("ipo")


# ---------------------------------------------------------------- log-ratios from models

class _Rec:
    """Minimal record: the objectives only need tokens and an image."""

    def __init__(self, image, q, yw, yl):
        self.image, self.question_tokens, self.chosen_tokens, self.rejected_tokens = image, q, yw, yl

    def model_image(self, cfg):
        return self.image

    def with_image(self, image):
        return _Rec(image, self.question_tokens, self.chosen_tokens, self.rejected_tokens)


def _record(cfg, seed, lw=3, ll=2):
    rng = SeededRng(seed).split("rec")
    g = cfg.image_grid
    return _Rec(rng.uniform(0, 1, size=(g, g, cfg.channels)), list(rng.integers(0, cfg.vocab_size, 3)),
                list(rng.integers(0, cfg.vocab_size, lw)), list(rng.integers(0, cfg.vocab_size, ll)))


def test_log_ratios_zero_when_policy_is_reference():
    cfg = tiny_config()
    pol = MultimodalLM(cfg)
    ref = snapshot_reference(pol)
    rec = _record(cfg, 1)
    b = O.compute_log_ratios(pol, ref, rec, m_l=np.zeros_like(rec.image))
    assert (b.lr_w.item(), b.lr_l.item(), b.lr_img.item()) == (0.0, 0.0, 0.0)


def test_log_ratio_recomputation_oracle():
    cfg = tiny_config()
    pol = jitter(MultimodalLM(cfg), 0.05, 1)
    ref = snapshot_reference(MultimodalLM(cfg))
    for seed in range(5):
        rec = _record(cfg, seed)
        m_l = SeededRng(seed).uniform(0, 1, size=rec.image.shape)
        b = O.compute_log_ratios(pol, ref, rec, m_l)
        with no_grad():
            q = rec.question_tokens
            lw = sequence_log_prob(pol, rec.image, q, rec.chosen_tokens).item() - \
                sequence_log_prob(ref, rec.image, q, rec.chosen_tokens).item()
            ll = sequence_log_prob(pol, rec.image, q, rec.rejected_tokens).item() - \
                sequence_log_prob(ref, rec.image, q, rec.rejected_tokens).item()
            li = sequence_log_prob(pol, m_l, q, rec.chosen_tokens).item() - \
                sequence_log_prob(ref, m_l, q, rec.chosen_tokens).item()
        assert b.lr_w.item() == pytest.approx(lw, abs=1e-12)
        assert b.lr_l.item() == pytest.approx(ll, abs=1e-12)
        assert b.lr_img.item() == pytest.approx(li, abs=1e-12)


def test_batched_ratios_independent_of_order():
    cfg = tiny_config()
    pol = jitter(MultimodalLM(cfg), 0.05, 2)
    ref = snapshot_reference(MultimodalLM(cfg))
    ch = random_batch(cfg, 6, 3, 4, seed=1, ragged=True)
    rj = random_batch(cfg, 6, 3, 4, seed=2, ragged=True).with_images(ch.images)
    with no_grad():
        a = O.batch_log_ratios(pol, ref, ch, rj)
        perm = np.array([5, 3, 1, 0, 2, 4])
        sub = lambda b: type(b)(b.images[perm], b.question_tokens[perm], b.response_tokens[perm],  # noqa: E731
                                b.response_mask[perm])
        b = O.batch_log_ratios(pol, ref, sub(ch), sub(rj))
    np.testing.assert_allclose(b.lr_w.data, a.lr_w.data[perm], atol=1e-12)
    np.testing.assert_allclose(b.lr_l.data, a.lr_l.data[perm], atol=1e-12)


def test_config_mismatch_raises():
    pol = MultimodalLM(tiny_config())
    ref = MultimodalLM(tiny_config(d_model=8))
    with pytest.raises(ObjectiveError):
        O.compute_log_ratios(pol, ref, _record(tiny_config(), 0))


def test_reference_pass_has_no_gradient():
    cfg = tiny_config()
    pol = jitter(MultimodalLM(cfg), 0.05, 3)
    ref = snapshot_reference(MultimodalLM(cfg))
    rec = _record(cfg, 4)
    b = O.compute_log_ratios(pol, ref, rec, np.zeros_like(rec.image))
    from mdpo_lab.tensor import backward
    backward(O.mdpo_loss(b, ObjectiveConfig())[0])
    assert all(p.grad is None for p in ref.params.values())
    assert any(p.grad is not None and np.any(p.grad) for p in pol.params.values())


# ---------------------------------------------------------------- no-image variant

def test_no_image_loss_anchor_and_image_independence():
    cfg = tiny_config()
    pol = MultimodalLM(cfg)
    ref = snapshot_reference(pol)
    ocfg = ObjectiveConfig.preset("dpo", no_image=True)
    rec = _record(cfg, 7)
    assert O.dpo_no_image_loss(pol, ref, rec, ocfg).item() == pytest.approx(LN2, abs=1e-12)

    jitter(pol, 0.1, 9)
    other = rec.with_image(SeededRng(1).uniform(0, 1, size=rec.image.shape))
    assert O.dpo_no_image_loss(pol, ref, rec, ocfg).item() == O.dpo_no_image_loss(pol, ref, other, ocfg).item()
    with_image = O.dpo_loss(O.compute_log_ratios(pol, ref, rec), ocfg).item()
    assert abs(with_image - O.dpo_no_image_loss(pol, ref, rec, ocfg).item()) > 1e-6


def test_no_image_loss_requires_flag():
    cfg = tiny_config()
    pol = MultimodalLM(cfg)
    with pytest.raises(ObjectiveError):
        O.dpo_no_image_loss(pol, snapshot_reference(pol), _record(cfg, 0), ObjectiveConfig())


# ---------------------------------------------------------------- gradients through the model

def all_losses_fn(pol, ref, ch, rj, ri, cfg):
    """Every objective from one policy forward; the frozen reference is evaluated once up front."""
    from mdpo_lab.model import reference_log_probs
    ref_lp = reference_log_probs(ref, O.stack_batches([ch, rj, ri]))

    def f():
        b = O.batch_log_ratios(pol, ref, ch, rj, ri, ref_cache=ref_lp)
        return {"dpo": O.dpo_loss(b, cfg), "copo": O.copo_loss(b, cfg), "ancpo": O.ancpo_loss(b, cfg),
                "mdpo": O.mdpo_loss(b, cfg)[0]}
    return f


def test_loss_gradients_through_model():
    cfg = tiny_config(seed=11)
    pol = jitter(MultimodalLM(cfg), 0.1, 11)
    ref = snapshot_reference(MultimodalLM(cfg))
    ch = random_batch(cfg, 3, 3, 3, seed=12)
    rj = random_batch(cfg, 3, 3, 3, seed=13).with_images(ch.images)
    ri = ch.with_images(random_batch(cfg, 3, 3, 3, seed=14).images)
    ocfg = ObjectiveConfig(beta=0.5, delta=0.1, anchor="chosen+rejected+image")
    report = grad_check(all_losses_fn(pol, ref, ch, rj, ri, ocfg), pol.parameters(), tol=1e-5,
                        names=list(pol.params))
    assert report.passed, report.failures()
    assert len(report.checks) == 4 * len(pol.params)


def test_mdpo_on_four_parameter_toy():
    # lr_* are linear in a 4-vector so every loss term is a smooth function of it
    theta = Tensor(np.array([[0.3], [-0.2], [0.5], [0.1]]), requires_grad=True)
    feats = SeededRng(3).normal(size=(3, 4))
    cfg = ObjectiveConfig(beta=0.7, delta=0.2, anchor="chosen+rejected+image")

    def f():
        lr = (Tensor(feats) @ theta).reshape(3)
        return O.mdpo_loss(LogRatioBundle(lr[0], lr[1], lr[2], lr[0]), cfg)[0]

    assert grad_check(f, [theta], tol=1e-5).passed
