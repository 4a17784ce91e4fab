import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from crnas import attacks as at
from crnas.autodiff import rgb_to_hsv


def linear_model(w):
    """Two-class logistic model: logits (0, w.x)."""

    def model(x):
        z = (x.flatten(1) * w.flatten()).sum(1)
        return torch.stack([torch.zeros_like(z), z], dim=1)

    return model


@pytest.fixture
def lin(f64):
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(3, 4, 4, generator=gen)
    x = 0.2 + 0.6 * torch.rand(5, 3, 4, 4, generator=gen)
    y = torch.zeros(5, dtype=torch.long)
    return linear_model(w), x, y, w


# cw loss


def test_cw_loss_floor():
    assert at.cw_loss(torch.tensor([[5.0, 1.0]]), torch.tensor([0]), 0.5).item() == -0.5


def test_cw_loss_direct():
    assert at.cw_loss(torch.tensor([[1.0, 2.0]]), torch.tensor([0]), 0.0).item() == 1.0


def test_cw_loss_matches_scan():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(20, 6, generator=gen)
    y = torch.randint(0, 6, (20,), generator=gen)
    got = at.cw_loss(logits, y, 0.3)
    for b in range(20):
        best = max(logits[b, i].item() for i in range(6) if i != y[b])
        assert got[b].item() == pytest.approx(max(best - logits[b, y[b]].item(), -0.3))


def test_cw_loss_rejects_single_class():
    with pytest.raises(at.AttackError):
        at.cw_loss(torch.zeros(2, 1), torch.tensor([0, 0]))


# fgsm / pgd / mi


def test_fgsm_zero_budget(lin):
    model, x, y, _ = lin
    assert torch.equal(at.fgsm(model, x, y, 0.0).x_adv, x)


def test_fgsm_logistic_closed_form(lin):
    model, x, y, w = lin
    eps = 0.05
    # d(CE)/dx for label 0 is sigmoid(w.x) * w, so the sign is sign(w)
    expect = torch.clamp(x + eps * torch.sign(w).expand_as(x), 0, 1)
    assert torch.equal(at.fgsm(model, x, y, eps).x_adv, expect)
    flipped = torch.clamp(x - eps * torch.sign(w).expand_as(x), 0, 1)
    assert torch.equal(at.fgsm(model, x, 1 - y, eps).x_adv, flipped)


def test_standard_suite_defaults():
    assert at.default_spec("fgsm_linf").eps == pytest.approx(1 / 255)
    for kind in ("pgd_linf", "mi_linf", "pgd_l2", "mi_l2"):
        spec = at.default_spec(kind)
        assert (spec.eps, spec.steps) == (pytest.approx(1 / 255), 7)
        assert spec.alpha == pytest.approx(spec.eps / 4)
    assert at.default_spec("fgsm_linf").steps == 1
    intervals = {k: at.default_spec(k).interval for k in at.SEMANTIC}
    assert intervals == {"hue": (-math.pi, math.pi), "saturation": (0.7, 1.3), "rotation": (-10.0, 10.0),
                         "brightness": (-0.2, 0.2), "contrast": (0.7, 1.3)}
    assert all(at.default_spec(k).steps == 1 for k in at.SEMANTIC)
    caa = at.default_spec("caa")
    assert [s.kind for s in caa.sequence] == ["hue", "saturation", "rotation", "brightness", "contrast", "pgd_linf"]
    assert [s.kind for s in at.default_suite()] == list(at.KINDS)


def test_pgd_single_full_step_is_fgsm(lin):
    model, x, y, _ = lin
    a = at.pgd_linf(model, x, y, eps=0.03, alpha=0.03, steps=1).x_adv
    assert torch.equal(a, at.fgsm(model, x, y, 0.03).x_adv)


def test_pgd_linear_reaches_box_argmax(lin):
    model, x, y, w = lin
    eps = 0.04
    out = at.pgd_linf(model, x, y, eps=eps, alpha=eps / 4, steps=7).x_adv
    expect = torch.clamp(x + eps * torch.sign(w).expand_as(x), 0, 1)
    assert torch.allclose(out, expect, atol=1e-12)


def test_pgd_l2_zero_budget(lin):
    model, x, y, _ = lin
    assert torch.equal(at.pgd_l2(model, x, y, eps=0.0, alpha=0.1, steps=3).x_adv, x)


def test_pgd_l2_one_step(lin):
    model, x, y, w = lin
    out = at.pgd_l2(model, x, y, eps=1.0, alpha=0.01, steps=1).x_adv
    expect = x + 0.01 * w / w.norm()
    assert torch.allclose(out, expect, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 2.0), st.integers(0, 1000))
def test_l2_projection_lands_on_surface(eps, seed):
    gen = torch.Generator().manual_seed(seed)
    delta = torch.randn(4, 3, 5, 5, generator=gen, dtype=torch.float64) * 3
    delta[0] *= 1e-4  # inside the ball: untouched
    out = at.project_l2(delta, eps)
    norms = out.flatten(1).norm(dim=1)
    inside = delta.flatten(1).norm(dim=1) <= eps
    for i in range(4):
        if inside[i]:
            assert torch.equal(out[i], delta[i])
        else:
            assert abs(norms[i].item() - eps) < 1e-9


def test_l2_zero_gradient_takes_zero_step(f64):
    model = linear_model(torch.zeros(3, 4, 4))
    x = torch.full((2, 3, 4, 4), 0.5)
    assert torch.equal(at.pgd_l2(model, x, torch.tensor([0, 1]), eps=0.5, alpha=0.1, steps=2).x_adv, x)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_mi_zero_momentum_is_pgd(lin, norm):
    model, x, y, _ = lin
    pgd = at.pgd_linf if norm == "linf" else at.pgd_l2
    a = at.mi_attack(model, x, y, eps=0.03, alpha=0.01, steps=5, momentum=0.0, norm=norm).x_adv
    assert torch.equal(a, pgd(model, x, y, eps=0.03, alpha=0.01, steps=5).x_adv)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_mi_unit_momentum_constant_gradient(lin, norm):
    model, x, y, _ = lin
    pgd = at.pgd_linf if norm == "linf" else at.pgd_l2
    a = at.mi_attack(model, x, y, eps=0.05, alpha=0.01, steps=6, momentum=1.0, norm=norm).x_adv
    b = pgd(model, x, y, eps=0.05, alpha=0.01, steps=6).x_adv
    assert torch.allclose(a, b, atol=1e-12)


def test_random_start_is_seeded(lin):
    model, x, y, _ = lin
    a = at.pgd_linf(model, x, y, eps=0.03, steps=2, random_start=True, seed=4).x_adv
    b = at.pgd_linf(model, x, y, eps=0.03, steps=2, random_start=True, seed=4).x_adv
    c = at.pgd_linf(model, x, y, eps=0.03, steps=2, random_start=True, seed=5).x_adv
    assert torch.equal(a, b) and not torch.equal(a, c)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["fgsm_linf", "pgd_linf", "mi_linf", "pgd_l2", "mi_l2"]), st.floats(0.0, 0.3),
       st.integers(1, 4), st.booleans(), st.integers(0, 10_000))
def test_constraint_exactness(kind, eps, steps, random_start, seed):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.rand(3, 3, 4, 4, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 2, (3,), generator=gen)
    spec = at.AttackSpec(kind, eps=eps, steps=steps, random_start=random_start, seed=seed)
    out = at.run_attack(linear_model(w), x, y, spec).x_adv
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    delta = (out - x).flatten(1)
    bound = delta.abs().max(1).values if kind.endswith("linf") else delta.norm(dim=1)
    assert float(bound.max()) <= eps + 1e-9


# semantic


@pytest.mark.parametrize("kind", at.SEMANTIC)
def test_identity_parameter_leaves_image(kind, f64):
    x = torch.rand(3, 3, 6, 6, generator=torch.Generator().manual_seed(2))
    out = at.apply_semantic(kind, x, torch.full((3,), at.IDENTITY[kind]))
    assert float((out - x).abs().max()) < 1e-6


def test_hue_leaves_grey_images(f64):
    grey = torch.rand(2, 1, 5, 5, generator=torch.Generator().manual_seed(0)).expand(2, 3, 5, 5).clone()
    for d in (-3.0, -1.0, 0.5, 3.0):
        out = at.apply_semantic("hue", grey, torch.full((2,), d))
        assert float((out - grey).abs().max()) < 1e-12


def test_hue_shift_moves_hue(f64):
    x = torch.tensor([0.8, 0.2, 0.2]).view(1, 3, 1, 1)
    out = at.apply_semantic("hue", x, torch.tensor([1.0]))
    assert rgb_to_hsv(out)[0, 0].item() == pytest.approx(1.0)


def _disk(n, r):
    ii, jj = torch.meshgrid(torch.arange(n), torch.arange(n), indexing="ij")
    c = (n - 1) / 2
    return (((ii - c) ** 2 + (jj - c) ** 2) <= r * r).double().expand(1, 3, n, n).clone()


def test_rotation_round_trip_disk(f64):
    disk = _disk(64, 16)
    for angle in (10.0, -10.0, -7.0, 3.0):
        there = at.apply_semantic("rotation", disk, torch.tensor([angle]))
        back = at.apply_semantic("rotation", there, torch.tensor([-angle]))
        assert float((back - disk).abs().mean()) < 1e-2


def test_rotation_matches_grid_sample(f64):
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    for angle in (-10.0, 4.5, 10.0):
        t = math.radians(angle)
        theta = torch.tensor([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0]]).expand(2, 2, 3)
        grid = F.affine_grid(theta, list(x.shape), align_corners=True)
        ref = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
        out = at.apply_semantic("rotation", x, torch.full((2,), angle))
        assert torch.allclose(out, ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(at.SEMANTIC), st.integers(1, 4), st.integers(0, 10_000),
       st.sampled_from(["random", "identity"]))
def test_semantic_parameter_stays_in_interval(kind, steps, seed, init):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.rand(3, 3, 4, 4, generator=gen, dtype=torch.float64)
    lo, hi = at.TABLE_INTERVALS[kind]
    res = at.semantic_attack(linear_model(w), x, torch.tensor([0, 1, 0]), kind, (lo, hi), steps, init=init, seed=seed)
    assert bool(((res.params >= lo) & (res.params <= hi)).all())
    assert float(res.x_adv.min()) >= 0 and float(res.x_adv.max()) <= 1


def test_semantic_rejects_bad_specs():
    with pytest.raises(at.AttackError):
        at.AttackSpec("hue", interval=(-7.0, 0.0))
    with pytest.raises(at.AttackError):
        at.AttackSpec("contrast", interval=(1.3, 0.7))
    with pytest.raises(at.AttackError):
        at.AttackSpec("blur")
    with pytest.raises(at.AttackError):
        at.apply_semantic("blur", torch.zeros(1, 3, 2, 2), torch.zeros(1))


# composite


def test_composite_of_one_is_the_attack(lin):
    model, x, y, _ = lin
    spec = at.AttackSpec("pgd_linf", eps=0.02, steps=3)
    a = at.composite_attack(model, x, y, [spec]).x_adv
    assert torch.equal(a, at.run_attack(model, x, y, spec).x_adv)
    with pytest.raises(at.AttackError):
        at.composite_attack(model, x, y, [])


def test_attacks_deterministic(toy_model, toy_data):
    model, _ = toy_model
    x, y = toy_data[1].images[:32], toy_data[1].labels[:32]
    for spec in at.default_suite(seed=3):
        assert torch.equal(at.run_attack(model, x, y, spec).x_adv, at.run_attack(model, x, y, spec).x_adv)


def test_composite_raises_loss_on_trained_model(toy_model, toy_data):
    model, _ = toy_model
    x, y = toy_data[1].images[:128], toy_data[1].labels[:128]
    clean = at.run_attack(model, x, y, at.AttackSpec("clean")).loss
    comp = at.run_attack(model, x, y, at.default_spec("caa", seed=1)).loss
    assert float((comp >= clean).double().mean()) >= 0.8


def test_every_attack_at_most_clean_accuracy(toy_model, toy_data):
    model, clean_acc = toy_model
    x, y = toy_data[1].images, toy_data[1].labels
    for spec in at.default_suite(seed=0):
        acc = float(at.run_attack(model, x, y, spec).correct.double().mean())
        assert acc <= clean_acc + 1e-12, spec.kind
