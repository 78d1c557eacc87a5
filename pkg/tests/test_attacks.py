import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import linear_encoder
from simcat.attacks import (CW_L2, PGD_L2, PGD_LINF, CleanAdvPair, ThreatSpec, attack_success, color_shift_attack,
                            cw_l2_attack, cw_objective, load_pairs, load_threat_specs, make_pairs, perturbation_norm,
                            pgd_attack, project, projected_gradient_ascent, save_pairs, save_threat_specs,
                            within_budget)
from simcat.encoders import BaseClassifier
from simcat.errors import AttackError, FormatError, InvalidInputError
from simcat.heads import LinearHead


# ---------------------------------------------------------------------------
# projection

def test_project_examples():
    assert np.array_equal(project(np.array([0.5, -0.2]), "Linf", 0.1), [0.1, -0.1])
    assert np.allclose(project(np.array([3.0, 4.0]), "L2", 1.0), [0.6, 0.8], atol=1e-15)
    inside = np.array([0.1, 0.2])
    assert np.array_equal(project(inside, "L2", 1.0), inside)
    with pytest.raises(InvalidInputError):
        project(inside, "L2", -1.0)


@pytest.mark.parametrize("norm", ["L2", "Linf"])
def test_projection_algebra_on_random_vectors(norm):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = rng.normal(size=rng.integers(1, 20)) * rng.exponential(2.0)
        eps = rng.exponential(1.0)
        p = project(d, norm, eps)
        assert np.array_equal(project(p, norm, eps), p)
        assert perturbation_norm(p, norm) <= eps
        inner = project(d, norm, perturbation_norm(d, norm) * 1.5 + 1e-9)
        assert np.array_equal(inner, d)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)), st.floats(0, 10),
       st.sampled_from(["L2", "Linf"]))
def test_projection_properties_hypothesis(d, eps, norm):
    p = project(d, norm, eps)
    assert perturbation_norm(p, norm) <= eps
    assert np.array_equal(project(p, norm, eps), p)


def test_infinite_l2_budget_is_identity():
    d = np.array([1e6, -3.0])
    assert np.array_equal(project(d, "L2", math.inf), d)


# ---------------------------------------------------------------------------
# PGD

def test_pgd_linear_surrogate_reaches_budget():
    x = torch.tensor([[0.1], [0.5], [0.9]], dtype=torch.float64)
    history = []
    out = projected_gradient_ascent(lambda z: z[:, 0], x, "Linf", 0.3, 0.1, 40, history=history)
    assert np.allclose(out.numpy(), np.clip(x.numpy() + 0.3, 0, 1), atol=1e-12, rtol=0)
    assert all(b >= a for a, b in zip(history, history[1:]))


def test_pgd_zero_budget_returns_input(classifier, images):
    out = pgd_attack(classifier, images, np.zeros(len(images), int), ThreatSpec("z", "Linf", 0.0, 0.1, 5))
    assert np.array_equal(out, images)


def test_pgd_rejects_color_spec(classifier, images):
    with pytest.raises(InvalidInputError):
        pgd_attack(classifier, images, np.zeros(len(images), int), ThreatSpec("c", "ColorShift", 0.1, 0.01, 2))


def test_pgd_increases_loss_and_is_deterministic(classifier, images):
    y = classifier.predict(images)
    a = pgd_attack(classifier, images, y, PGD_L2)
    b = pgd_attack(classifier, images, y, PGD_L2)
    assert np.array_equal(a, b)
    ce = lambda z: torch.nn.functional.cross_entropy(classifier.logits(torch.as_tensor(z)), torch.as_tensor(y))
    assert ce(a) > ce(images)


def test_pgd_random_start_seeded(classifier, images):
    spec = ThreatSpec("r", "Linf", 8 / 255, 2 / 255, 3, random_start=True)
    y = classifier.predict(images)
    a = pgd_attack(classifier, images, y, spec, seed=3)
    assert np.array_equal(a, pgd_attack(classifier, images, y, spec, seed=3))
    assert not np.array_equal(a, pgd_attack(classifier, images, y, spec, seed=4))


def test_pgd_nan_gradient_raises_with_step():
    x = torch.full((2, 3), 0.5, dtype=torch.float64)
    with pytest.raises(AttackError) as info:
        projected_gradient_ascent(lambda z: torch.sqrt(z - 0.5).sum(dim=1), x, "L2", 1.0, 0.1, 3)
    assert info.value.step == 0


def test_default_pgd_specs():
    assert (PGD_L2.epsilon, PGD_L2.step_size, PGD_L2.iterations) == (1.0, 0.2, 40)
    assert (PGD_LINF.epsilon, PGD_LINF.step_size, PGD_LINF.iterations) == (8 / 255, 2 / 255, 40)
    assert CW_L2.cw_constant == 0.25 and CW_L2.step_size == 0.01 and CW_L2.iterations == 100


# ---------------------------------------------------------------------------
# CW

def two_d_classifier(W, b):
    enc = linear_encoder(np.eye(2), np.zeros(2), (1, 1, 2))
    return BaseClassifier(enc, LinearHead(W, b))


def test_cw_zero_constant_returns_input(classifier, images):
    spec = ThreatSpec("cw0", "L2", math.inf, 0.01, 20, cw_constant=0.0)
    out = cw_l2_attack(classifier, images, classifier.predict(images), spec)
    assert np.array_equal(out, images)


def test_cw_beats_grid_search_on_2d_linear_classifier():
    clf = two_d_classifier(np.array([[2.0, 0.0], [-2.0, 0.0]]), np.array([-0.886, 0.886]))
    x = np.array([[[[0.5, 0.5]]]])
    y = np.array([0])
    spec = ThreatSpec("cw", "L2", math.inf, 0.01, 100, cw_constant=0.25)
    adv = cw_l2_attack(clf, x, y, spec)
    obj = lambda z: float(cw_objective(clf, torch.as_tensor(x), torch.as_tensor(z), torch.as_tensor(y), 0.25)[0])
    grid = np.linspace(0, 1, 41)
    best_grid = min(obj(np.array([[[[u, v]]]])) for u in grid for v in grid)
    assert obj(adv) <= best_grid
    assert obj(adv) <= obj(x)


def test_cw_descent_property_and_box(classifier, images):
    y = classifier.predict(images)
    spec = ThreatSpec("cw", "L2", 2.0, 0.01, 30, cw_constant=0.25)
    adv = cw_l2_attack(classifier, images, y, spec)
    X, A, Y = map(torch.as_tensor, (images, adv, y))
    assert torch.all(cw_objective(classifier, X, A, Y, 0.25) <= cw_objective(classifier, X, X, Y, 0.25))
    assert all(within_budget(c, a, spec) for c, a in zip(images, adv))


def test_cw_requires_constant(classifier, images):
    with pytest.raises(InvalidInputError):
        cw_l2_attack(classifier, images, np.zeros(len(images), int), PGD_L2)
    with pytest.raises(InvalidInputError):
        ThreatSpec("bad", "Linf", 0.1, cw_constant=0.25)


# ---------------------------------------------------------------------------
# color shift

def test_color_shift_matches_gradient_sign_on_linear_model(rng):
    shape = (4, 4, 3)
    A = rng.normal(size=(2, 48)) * 0.1
    clf = BaseClassifier(linear_encoder(A, np.zeros(2), shape), LinearHead(np.eye(2), np.zeros(2)))
    x = rng.uniform(0.3, 0.7, size=(1,) + shape)
    y = np.array([0])
    spec = ThreatSpec("color", "ColorShift", 0.1, 0.02, 10)
    adv = color_shift_attack(clf, x, y, spec)
    shift = (adv - x)[0]
    assert np.allclose(shift, shift[0, 0][None, None, :], atol=1e-12)
    # d CE / d s_c has the sign of sum over pixels of (A[1] - A[0]) in channel c (A columns are channel-major)
    expected = np.sign((A[1] - A[0]).reshape(3, 4, 4).sum(axis=(1, 2))) * 0.1
    assert np.allclose(shift[0, 0], expected, atol=1e-12)


def test_color_shift_zero_budget_and_structure(classifier, images):
    y = classifier.predict(images)
    assert np.array_equal(color_shift_attack(classifier, images, y, ThreatSpec("c", "ColorShift", 0.0, 0.02, 4)),
                          images)
    adv = color_shift_attack(classifier, images, y, ThreatSpec("c", "ColorShift", 0.05, 0.02, 4))
    s = adv - images
    assert np.abs(s).max() <= 0.05 + 1e-12
    assert np.allclose(s, s[:, :1, :1, :], atol=1e-12)


def test_color_shift_grayscale_is_scalar_shift(rng):
    enc = linear_encoder(rng.normal(size=(2, 16)), np.zeros(2), (4, 4, 1))
    clf = BaseClassifier(enc, LinearHead(np.eye(2), np.zeros(2)))
    x = rng.uniform(0.3, 0.7, size=(2, 4, 4, 1))
    adv = color_shift_attack(clf, x, np.array([0, 1]), ThreatSpec("c", "ColorShift", 0.1, 0.05, 3))
    s = adv - x
    assert np.allclose(s, s[:, :1, :1, :], atol=1e-12)


# ---------------------------------------------------------------------------
# success, pairs and specs

def test_attack_success_is_one_minus_accuracy(classifier, images):
    y = np.array([0, 1, 2, 0, 1, 2])
    pred = classifier.predict(images)
    success = attack_success(classifier, images, y)
    assert success.mean() == pytest.approx(1 - np.mean(pred == y))
    assert attack_success(classifier, images[0], pred[0]) is False
    assert attack_success(classifier, images[0], (pred[0] + 1) % 3) is True


def test_make_pairs_budget_and_persistence(tmp_path, classifier, images):
    specs = [PGD_L2, PGD_LINF, ThreatSpec("CW", "L2", 2.0, 0.01, 10, cw_constant=0.25),
             ThreatSpec("Color", "ColorShift", 0.1, 0.02, 5)]
    imgs = np.concatenate([images, images[:2]])
    pairs = make_pairs(classifier, imgs, classifier.predict(imgs), specs)
    assert len(pairs) == 8 and len({p.pair_id for p in pairs}) == 8
    assert all(within_budget(p, spec=specs[p.threat]) for p in pairs)
    save_pairs(tmp_path / "p", pairs, specs)
    back, back_specs = load_pairs(tmp_path / "p")
    assert back_specs == specs
    for a, b in zip(pairs, back):
        assert np.array_equal(a.adv, b.adv) and a.pair_id == b.pair_id and a.success == b.success


def test_load_pairs_missing_archive(tmp_path):
    with pytest.raises(FormatError):
        load_pairs(tmp_path)


def test_threat_spec_json_round_trip_with_unbounded_budget(tmp_path):
    specs = [CW_L2, PGD_LINF]
    save_threat_specs(tmp_path / "t.json", specs)
    text = (tmp_path / "t.json").read_text()
    json.loads(text, parse_constant=lambda c: pytest.fail(f"non-standard JSON constant {c}"))
    assert load_threat_specs(tmp_path / "t.json") == specs


def test_threat_spec_validation():
    with pytest.raises(InvalidInputError):
        ThreatSpec("x", "L1", 1.0)
    with pytest.raises(InvalidInputError):
        ThreatSpec("x", "L2", -1.0)
    with pytest.raises(InvalidInputError):
        ThreatSpec("x", "L2", 1.0, 0.0, 5)
    with pytest.raises(InvalidInputError):
        ThreatSpec.from_dict({"norm": "L2"})


def test_within_budget_detects_violations():
    clean = np.full((2, 2, 1), 0.5)
    assert not within_budget(clean, clean + 0.2, PGD_LINF)
    assert not within_budget(clean, clean + 0.6, ThreatSpec("big", "Linf", 1.0))
    assert within_budget(CleanAdvPair(clean, clean + 0.01, 0, 0, False, "a"), spec=PGD_LINF)
