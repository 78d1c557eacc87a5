"""Adaptive attacks on a detector + base classifier, and momentum-averaged adversarial training.

The adaptive attacker perturbs an *adversarial* example ``x_hat`` so that the
base classifier stays fooled while the detector's score for "adversarial"
drops. Adversarial training alternates crafting such perturbations with an
exact convex refit of the detector, smoothed by a momentum average of the
per-epoch solutions.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import projected_gradient_ascent
from .augment import AT_POLICY, AugmentPolicy, augment
from .encoders import embed
from .errors import InvalidInputError, SimCatError
from .heads import LabeledEmbeddingSet, LinearHead, detect, fit_detector
from .solver import SolverConfig

REPLACE = "replace"


@dataclass(frozen=True)
class AdaptiveSpec:
    """PGD-L2 settings for the adaptive attack (ImageNet AT settings by default)."""

    norm: str = "L2"
    epsilon: float = 2.0
    steps: int = 20
    step_size: float = 0.05

    def __post_init__(self):
        if self.norm != "L2":
            raise InvalidInputError("the adaptive attack is defined for the L2 norm")
        if not self.epsilon >= 0:
            raise InvalidInputError("epsilon must be >= 0")
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if self.steps > 0 and not self.step_size > 0:
            raise InvalidInputError("step_size must be > 0")

    def to_dict(self):
        return {"norm": self.norm, "epsilon": self.epsilon, "steps": self.steps, "step_size": self.step_size}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("norm", "epsilon", "steps", "step_size") if k in d})


def _check_beta(beta):
    if isinstance(beta, str):
        if beta != REPLACE:
            raise InvalidInputError(f"beta must be a non-negative number or {REPLACE!r}")
        return
    if not beta >= 0:
        raise InvalidInputError("beta must be >= 0")


@dataclass(frozen=True)
class ATConfig:
    """Adversarial-training settings.

    ``beta`` is the momentum weight of each new solution; ``"replace"`` (or
    ``math.inf``) discards the running average every epoch.
    ``detector_weight`` scales the evasion term of the adaptive objective.
    """

    epochs: int = 20
    beta: object = 100.0
    samples_per_attack: int = 25
    augmentation: AugmentPolicy = AT_POLICY
    seed: int = 0
    adaptive: AdaptiveSpec = field(default_factory=AdaptiveSpec)
    lam: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    detector_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        _check_beta(self.beta)
        if self.samples_per_attack is not None and self.samples_per_attack < 1:
            raise InvalidInputError("samples_per_attack must be >= 1")

    def to_dict(self):
        return {"epochs": self.epochs, "beta": self.beta, "samples_per_attack": self.samples_per_attack,
                "augmentation": self.augmentation.to_dict(), "seed": self.seed,
                "adaptive": self.adaptive.to_dict(), "lambda": self.lam, "solver": self.solver.to_dict(),
                "detector_weight": self.detector_weight}


def _detector_tensors(detector, dtype):
    if detector.num_classes != 1:
        raise InvalidInputError("adaptive attacks target a binary detector (k = 1)")
    return torch.as_tensor(detector.W[0], dtype=dtype), float(detector.b[0])


def adaptive_objective(f, detector, encoder, x, y, detector_weight=1.0):
    """Per-sample ``CE(f(x), y) + CE(d(x), 1)`` on a torch batch (differentiable)."""
    w, b = _detector_tensors(detector, x.dtype)
    score = encoder(x) @ w + b
    # cross-entropy of a single-logit detector at label 1 is softplus(-score)
    return F.cross_entropy(f.logits(x), y, reduction="none") + detector_weight * F.softplus(-score)


def adaptive_attack(f, detector, encoder, x_adv, y, spec=AdaptiveSpec(), detector_weight=1.0, keep_best=True,
                    history=None, batch_size=256):
    """Perturb adversarial images so they keep fooling ``f`` and evade ``detector``.

    PGD-L2 from ``delta = 0`` with unit-normalized gradient steps, projected
    onto the ``epsilon`` ball around ``x_adv`` and the pixel box. Each sample
    keeps its best iterate by default, so the recorded objective never
    decreases. The gradient of the detector term flows through ``encoder``
    exactly as :func:`~simcat.encoders.embed_vjp` computes it.
    """
    if encoder.input_shape != f.encoder.input_shape:
        raise InvalidInputError("detector encoder and base classifier expect different input shapes")
    xt, single = encoder.prepare(x_adv)
    xt = xt.to(f.encoder.dtype)
    yt = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long)
    if yt.shape[0] != xt.shape[0]:
        raise InvalidInputError("labels must align with images")
    out = []
    for start in range(0, xt.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        yb = yt[sl]

        def loss_fn(z, yb=yb):
            return adaptive_objective(f, detector, encoder, z, yb, detector_weight)

        out.append(projected_gradient_ascent(loss_fn, xt[sl], spec.norm, spec.epsilon, spec.step_size, spec.steps,
                                             keep_best=keep_best, history=history))
    adv = torch.cat(out).numpy() if out else xt.numpy()
    return adv[0] if single else adv


def _flat(omega):
    return omega.flat if isinstance(omega, LinearHead) else np.asarray(omega, dtype=np.float64)


def momentum_update(omega, omega_t, beta):
    """``(omega + beta * omega_t) / (1 + beta)``; ``beta = "replace"`` or ``inf`` returns ``omega_t``.

    Accepts flat parameter arrays or :class:`LinearHead` objects (the result
    then keeps ``omega_t``'s metadata).
    """
    _check_beta(beta)
    a, b = _flat(omega), _flat(omega_t)
    if a.shape != b.shape:
        raise InvalidInputError(f"parameter shapes differ: {a.shape} vs {b.shape}")
    if beta == REPLACE or (not isinstance(beta, str) and math.isinf(beta)):
        new = b.copy()
    else:
        new = (a + beta * b) / (1.0 + beta)
    return omega_t.with_flat(new) if isinstance(omega_t, LinearHead) else new


def augment_clean(images, policy=AT_POLICY, seed=0):
    """Augmented copy of clean images (random resized crop, then horizontal flip), as numpy."""
    images = np.asarray(images)
    if images.size and (images.min() < 0 or images.max() > 1):
        raise InvalidInputError("pixel values must lie in [0, 1]")
    out = augment(images, policy, np.random.default_rng(seed))
    return out.numpy().astype(images.dtype, copy=False)


def robust_detection_rate(detector, f, encoder, adv_images, labels, spec=AdaptiveSpec(), detector_weight=1.0):
    """Fraction of adversarial samples still flagged (label 1) after the adaptive attack."""
    adv_images = np.asarray(adv_images)
    if len(adv_images) == 0:
        return float("nan")
    attacked = adaptive_attack(f, detector, encoder, adv_images, labels, spec, detector_weight)
    return float(np.mean(detect(detector, embed(encoder, attacked)) == 1))


def detection_accuracy(detector, clean_embeddings, adv_embeddings):
    """Balanced accuracy: mean of clean specificity and adversarial recall."""
    return 0.5 * (np.mean(detect(detector, clean_embeddings) == 0) + np.mean(detect(detector, adv_embeddings) == 1))


def select_per_threat(pairs, n):
    """The first ``n`` pairs of every threat, in input order (``n=None`` keeps all)."""
    if n is None:
        return list(pairs)
    counts, chosen = {}, []
    for p in pairs:
        if counts.get(p.threat, 0) < n:
            chosen.append(p)
            counts[p.threat] = counts.get(p.threat, 0) + 1
    return chosen


def head_checksum(head):
    return hashlib.sha256(np.ascontiguousarray(head.flat, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class ATResult:
    head: LinearHead
    initial: LinearHead
    log: list

    def write_log(self, path):
        Path(path).write_text(json.dumps(self.log, indent=1))


def adversarially_train(pairs, encoder, f, config=ATConfig(), eval_pairs=None, log_robustness=True,
                        return_result=False):
    """Momentum-averaged adversarial training of a SimCat detector.

    1. Fit ``omega`` on ``{(x, 0), (x_hat, 1)}``.
    2. Augment the clean images once to get ``x_tilde`` (fixed for all epochs).
    3. Each epoch: craft ``delta`` on every ``x_hat`` with the adaptive attack
       against the current ``omega``, refit ``omega_t`` from scratch on
       ``{(x, 0), (x_hat, 1), (x_tilde, 0), (x_hat + delta, 1)}``, and set
       ``omega = (omega + beta * omega_t) / (1 + beta)``.

    At most ``config.samples_per_attack`` pairs per threat are used. The
    per-epoch log holds the refit loss, clean detection accuracy and robust
    detection rate (on ``eval_pairs`` when given, else on the training pairs)
    and a checksum of ``omega``; ``log_robustness=False`` skips the
    (costly) per-epoch robustness evaluation.
    """
    pairs = select_per_threat(pairs, config.samples_per_attack)
    if not pairs:
        raise InvalidInputError("adversarial training needs at least one pair")
    if not encoder.frozen:
        raise InvalidInputError("adversarial training needs a frozen encoder")
    clean = np.stack([p.clean for p in pairs])
    adv = np.stack([p.adv for p in pairs])
    labels = np.array([p.label for p in pairs])
    e_clean, e_adv = embed(encoder, clean), embed(encoder, adv)
    fit = dict(lam=config.lam, config=config.solver)
    omega = fit_detector(LabeledEmbeddingSet.detection(e_clean, e_adv), **fit)
    initial = omega
    e_aug = embed(encoder, augment_clean(clean, config.augmentation, config.seed))
    ev = pairs if eval_pairs is None else list(eval_pairs)
    ev_clean = embed(encoder, np.stack([p.clean for p in ev]))
    ev_adv_images = np.stack([p.adv for p in ev])
    ev_adv = embed(encoder, ev_adv_images)
    ev_labels = np.array([p.label for p in ev])

    def record(epoch, head, loss):
        log.append({"epoch": epoch, "loss": loss,
                    "clean_accuracy": float(detection_accuracy(head, ev_clean, ev_adv)),
                    "robust_detection_rate": robust_detection_rate(head, f, encoder, ev_adv_images, ev_labels,
                                                                   config.adaptive, config.detector_weight)
                    if log_robustness else None,
                    "checksum": head_checksum(head)})

    log = []
    record(0, omega, None)
    for epoch in range(1, config.epochs + 1):
        try:
            perturbed = adaptive_attack(f, omega, encoder, adv, labels, config.adaptive, config.detector_weight)
            data = LabeledEmbeddingSet(np.concatenate([e_clean, e_adv, e_aug, embed(encoder, perturbed)]),
                                       np.repeat([0, 1, 0, 1], len(pairs)))
            omega_t, res = fit_detector(data, return_result=True, **fit)
        except SimCatError as exc:
            exc.epoch = epoch
            exc.args = (f"adversarial training epoch {epoch}: {exc}",) + exc.args[1:]
            raise
        omega = momentum_update(omega, omega_t, config.beta)
        record(epoch, omega, float(res.loss))
    result = ATResult(omega, initial, log)
    return result if return_result else omega
