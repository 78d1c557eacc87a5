"""Evasion attacks against a :class:`~simcat.encoders.BaseClassifier`.

Budgets are in pixel units for images in [0, 1]. Every attack returns
images inside the box and within ``epsilon`` of the input under the
threat's norm.
"""
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AttackError, FormatError, InvalidInputError

NORMS = ("L2", "Linf", "ColorShift")


@dataclass(frozen=True)
class ThreatSpec:
    """One threat model. A non-None ``cw_constant`` selects the CW-L2 attack."""

    name: str
    norm: str
    epsilon: float
    step_size: float = 0.0
    iterations: int = 0
    cw_constant: float = None
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in NORMS:
            raise InvalidInputError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if not self.epsilon >= 0:
            raise InvalidInputError("epsilon must be >= 0")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.iterations > 0 and not self.step_size > 0:
            raise InvalidInputError("step_size must be > 0 when iterations > 0")
        if self.cw_constant is not None:
            if self.cw_constant < 0:
                raise InvalidInputError("cw_constant must be >= 0")
            if self.norm != "L2":
                raise InvalidInputError("the CW attack is defined for the L2 norm only")

    @property
    def kind(self):
        if self.cw_constant is not None:
            return "cw"
        return "color" if self.norm == "ColorShift" else "pgd"

    def to_dict(self):
        # an unbounded budget is stored as null to keep the document strict JSON
        eps = None if math.isinf(self.epsilon) else self.epsilon
        return {"name": self.name, "norm": self.norm, "epsilon": eps, "step_size": self.step_size,
                "iterations": self.iterations, "c": self.cw_constant, "random_start": self.random_start}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(name=str(d["name"]), norm=str(d["norm"]), epsilon=math.inf if d["epsilon"] is None else float(d["epsilon"]),
                       step_size=float(d.get("step_size", 0.0)), iterations=int(d.get("iterations", 0)),
                       cw_constant=None if d.get("c") is None else float(d["c"]),
                       random_start=bool(d.get("random_start", False)))
        except KeyError as exc:
            raise InvalidInputError(f"threat spec missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed threat spec: {exc}") from exc


# SVHN settings; [0,255]-quoted budgets converted to [0,1]
PGD_L2 = ThreatSpec("PGD-L2", "L2", 1.0, 0.2, 40)
PGD_LINF = ThreatSpec("PGD-Linf", "Linf", 8 / 255, 2 / 255, 40)
CW_L2 = ThreatSpec("CW-L2", "L2", math.inf, 0.01, 100, cw_constant=0.25)


def load_threat_specs(path):
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc.get("threats", [doc])
    return [ThreatSpec.from_dict(d) for d in doc]


def save_threat_specs(path, specs):
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2))


# ---------------------------------------------------------------------------
# norms and projection

def _norms(delta, norm):
    """Per-sample norms of a batched torch tensor."""
    flat = delta.reshape(delta.shape[0], -1)
    if norm == "L2":
        return flat.norm(dim=1)
    return flat.abs().amax(dim=1) if flat.shape[1] else torch.zeros(flat.shape[0], dtype=delta.dtype)


def perturbation_norm(delta, norm):
    """Norm of a single perturbation (numpy or torch); ColorShift measures the largest shift."""
    d = torch.as_tensor(np.asarray(delta) if not torch.is_tensor(delta) else delta, dtype=torch.float64)
    return float(_norms(d.reshape(1, -1), "L2" if norm == "L2" else "Linf")[0])


def project_batch(delta, norm, epsilon):
    """Project each sample of a torch batch onto its epsilon ball."""
    if norm in ("Linf", "ColorShift"):
        return delta.clamp(-epsilon, epsilon)
    if math.isinf(epsilon):
        return delta
    n = _norms(delta, "L2")
    over = n > epsilon
    if not over.any():
        return delta
    shape = (-1,) + (1,) * (delta.ndim - 1)
    factor = torch.where(over, epsilon / torch.where(over, n, torch.ones_like(n)), torch.ones_like(n))
    out = delta * factor.view(shape)
    # rounding can leave the norm an ulp above epsilon; shrink until it is not
    for _ in range(8):
        still = _norms(out, "L2") > epsilon
        if not still.any():
            break
        out = torch.where(still.view(shape), out * (1 - 2.0 ** -50), out)
    return out


def project(delta, norm, epsilon):
    """Project a single perturbation onto the ``norm`` ball of radius ``epsilon``.

    Points already inside the ball are returned unchanged, so the map is
    idempotent.
    """
    if not epsilon >= 0:
        raise InvalidInputError("epsilon must be >= 0")
    is_np = not torch.is_tensor(delta)
    d = torch.as_tensor(np.asarray(delta, dtype=np.float64) if is_np else delta)
    out = project_batch(d.reshape(1, -1), "L2" if norm == "L2" else "Linf", epsilon).reshape(d.shape)
    return out.numpy() if is_np else out


# ---------------------------------------------------------------------------
# attack loops

def projected_gradient_ascent(loss_fn, x, norm, epsilon, step_size, iterations, random_start=False,
                              seed=0, keep_best=False, history=None):
    """Maximize per-sample ``loss_fn(x_adv)`` over the epsilon ball intersected with [0, 1].

    L2 steps follow the unit-normalized gradient; Linf steps follow its sign.
    With ``keep_best`` each sample returns its best visited iterate. When a
    list is passed as ``history`` the mean objective per step is appended to
    it (of the best iterates when ``keep_best``).
    """
    x = torch.as_tensor(x).detach()
    if epsilon == 0 or iterations == 0:
        return x.clone()
    shape = (-1,) + (1,) * (x.ndim - 1)
    if random_start:
        gen = torch.Generator().manual_seed(seed)
        noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * min(epsilon, 1.0)
        delta = project_batch(noise, norm, epsilon)
        x_adv = (x + delta).clamp(0, 1)
    else:
        x_adv = x.clone()
    best, best_loss = x_adv.clone(), None
    for step in range(iterations + 1):
        x_adv.requires_grad_(True)
        losses = loss_fn(x_adv)
        if keep_best:
            with torch.no_grad():
                cur = losses.detach()
                if best_loss is None:
                    best_loss = cur.clone()
                else:
                    better = cur > best_loss
                    best = torch.where(better.view(shape), x_adv.detach(), best)
                    best_loss = torch.where(better, cur, best_loss)
        if history is not None:
            history.append(float((best_loss if keep_best else losses.detach()).mean()))
        if step == iterations:
            break
        (grad,) = torch.autograd.grad(losses.sum(), x_adv)
        if not torch.all(torch.isfinite(grad)):
            raise AttackError("non-finite gradient in projected gradient ascent", step=step)
        with torch.no_grad():
            if norm == "L2":
                gn = _norms(grad, "L2").clamp_min(1e-12).view(shape)
                direction = grad / gn
            else:
                direction = grad.sign()
            delta = project_batch(x_adv + step_size * direction - x, norm, epsilon)
            x_adv = (x + delta).clamp(0, 1)
    return (best if keep_best else x_adv).detach()


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, start + size)


def pgd_attack(classifier, x, y, spec, seed=0, keep_best=False, batch_size=256):
    """PGD maximizing the cross-entropy of ``classifier`` at the true labels ``y``."""
    if spec.norm not in ("L2", "Linf"):
        raise InvalidInputError("pgd_attack supports L2 and Linf threats")
    xt, single = classifier.encoder.prepare(x)
    yt = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long)
    out = []
    for i, sl in enumerate(_batches(xt.shape[0], batch_size)):
        yb = yt[sl]

        def loss_fn(z, yb=yb):
            return F.cross_entropy(classifier.logits(z), yb, reduction="none")

        out.append(projected_gradient_ascent(loss_fn, xt[sl], spec.norm, spec.epsilon, spec.step_size,
                                             spec.iterations, spec.random_start, seed + i, keep_best))
    adv = torch.cat(out).numpy() if out else xt.numpy()
    return adv[0] if single else adv


def cw_margin(logits, y, kappa=0.0):
    """Untargeted CW margin ``max(z_y - max_{i != y} z_i, -kappa)``."""
    true = logits.gather(1, y[:, None])[:, 0]
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf")).amax(dim=1)
    return (true - other).clamp_min(-kappa)


def cw_objective(classifier, x, x_adv, y, c, kappa=0.0):
    d = (x_adv - x).reshape(x.shape[0], -1)
    return (d * d).sum(dim=1) + c * cw_margin(classifier.logits(x_adv), y, kappa)


def cw_l2_attack(classifier, x, y, spec, kappa=0.0, batch_size=256):
    """Fixed-constant CW-L2: gradient descent on ``||d||^2 + c * margin``.

    ``spec.step_size`` is the learning rate and ``spec.iterations`` the step
    count. Iterates are projected onto the box (and the L2 ball when
    ``epsilon`` is finite); each sample keeps its lowest-objective iterate,
    which starts at ``x`` itself.
    """
    if spec.cw_constant is None:
        raise InvalidInputError("cw_l2_attack needs a spec with cw_constant set")
    c = spec.cw_constant
    xt, single = classifier.encoder.prepare(x)
    yt = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long)
    out = []
    for sl in _batches(xt.shape[0], batch_size):
        xb, yb = xt[sl], yt[sl]
        shape = (-1,) + (1,) * (xb.ndim - 1)
        x_adv = xb.clone()
        with torch.no_grad():
            best_obj = cw_objective(classifier, xb, x_adv, yb, c, kappa)
        best = x_adv.clone()
        for step in range(spec.iterations):
            x_adv.requires_grad_(True)
            obj = cw_objective(classifier, xb, x_adv, yb, c, kappa)
            (grad,) = torch.autograd.grad(obj.sum(), x_adv)
            if not torch.all(torch.isfinite(grad)):
                raise AttackError("non-finite gradient in CW attack", step=step)
            with torch.no_grad():
                delta = project_batch(x_adv - spec.step_size * grad - xb, "L2", spec.epsilon)
                x_adv = (xb + delta).clamp(0, 1)
                obj = cw_objective(classifier, xb, x_adv, yb, c, kappa)
                if not torch.all(torch.isfinite(obj)):
                    raise AttackError("CW objective diverged", step=step)
                better = obj < best_obj
                best = torch.where(better.view(shape), x_adv, best)
                best_obj = torch.where(better, obj, best_obj)
        out.append(best.detach())
    adv = torch.cat(out).numpy() if out else xt.numpy()
    return adv[0] if single else adv


def color_shift_attack(classifier, x, y, spec, batch_size=256):
    """Shift each channel by a spatially constant amount ``s`` with ``|s| <= epsilon``.

    ``s`` follows signed-gradient ascent on the cross-entropy, and the result
    is ``clamp(x + s, 0, 1)``.
    """
    if spec.norm != "ColorShift":
        raise InvalidInputError("color_shift_attack needs a ColorShift spec")
    xt, single = classifier.encoder.prepare(x)
    yt = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long)
    out = []
    for sl in _batches(xt.shape[0], batch_size):
        xb, yb = xt[sl], yt[sl]
        s = torch.zeros(xb.shape[0], xb.shape[-1], dtype=xb.dtype)
        if spec.epsilon > 0:
            for step in range(spec.iterations):
                s.requires_grad_(True)
                z = (xb + s[:, None, None, :]).clamp(0, 1)
                loss = F.cross_entropy(classifier.logits(z), yb, reduction="sum")
                (grad,) = torch.autograd.grad(loss, s)
                if not torch.all(torch.isfinite(grad)):
                    raise AttackError("non-finite gradient in color shift attack", step=step)
                with torch.no_grad():
                    s = (s + spec.step_size * grad.sign()).clamp(-spec.epsilon, spec.epsilon)
        out.append((xb + s.detach()[:, None, None, :]).clamp(0, 1))
    adv = torch.cat(out).numpy() if out else xt.numpy()
    return adv[0] if single else adv


def run_attack(classifier, x, y, spec, seed=0):
    """Dispatch on ``spec.kind``."""
    if spec.kind == "cw":
        return cw_l2_attack(classifier, x, y, spec)
    if spec.kind == "color":
        return color_shift_attack(classifier, x, y, spec)
    return pgd_attack(classifier, x, y, spec, seed=seed)


def attack_success(classifier, x_adv, y):
    """True where the classifier's prediction differs from ``y``."""
    pred = classifier.predict(x_adv)
    result = np.asarray(pred) != np.asarray(y)
    return bool(result) if result.ndim == 0 else result


# ---------------------------------------------------------------------------
# clean / adversarial pairs

@dataclass(frozen=True, eq=False)
class CleanAdvPair:
    clean: np.ndarray
    adv: np.ndarray
    threat: int
    label: int
    success: bool
    pair_id: str


def within_budget(pair_or_clean, adv=None, spec=None, tol=1e-6):
    """Check the norm budget and the [0, 1] box for one pair."""
    if adv is None:
        clean, adv = pair_or_clean.clean, pair_or_clean.adv
    else:
        clean = pair_or_clean
    clean = np.asarray(clean, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    in_box = adv.min() >= -tol and adv.max() <= 1 + tol
    return in_box and perturbation_norm(adv - clean, spec.norm) <= spec.epsilon + tol


def make_pairs(classifier, images, labels, specs, seed=0, id_prefix="img"):
    """Attack ``images[j]`` with ``specs[threats[j]]``.

    ``images`` is split into ``len(specs)`` equal contiguous chunks, one per
    threat, so each clean image appears in exactly one pair.
    Failed attacks are kept with ``success=False``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    chunks = np.array_split(np.arange(len(images)), len(specs))
    pairs = []
    for t, (spec, idx) in enumerate(zip(specs, chunks)):
        if len(idx) == 0:
            continue
        adv = run_attack(classifier, images[idx], labels[idx], spec, seed=seed + t)
        success = np.atleast_1d(attack_success(classifier, adv, labels[idx]))
        for j, i in enumerate(idx):
            pairs.append(CleanAdvPair(images[i], adv[j].astype(images.dtype), t, int(labels[i]),
                                      bool(success[j]), f"{id_prefix}{i}"))
    return pairs


def save_pairs(directory, pairs, specs):
    """Write ``pairs.npz`` (clean and adversarial tensors) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(directory / "pairs.npz",
                        clean=np.stack([p.clean for p in pairs]) if pairs else np.zeros((0,)),
                        adv=np.stack([p.adv for p in pairs]) if pairs else np.zeros((0,)))
    manifest = {
        "threats": [s.to_dict() for s in specs],
        "pairs": [{"pair_id": p.pair_id, "threat": p.threat, "label": p.label, "success": p.success}
                  for p in pairs],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_pairs(directory):
    """Inverse of :func:`save_pairs`; returns ``(pairs, specs)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = np.load(directory / "pairs.npz")
        clean, adv = arrays["clean"], arrays["adv"]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read pair archive {directory}: {exc}") from exc
    records = manifest["pairs"]
    if len(records) != len(clean) and records:
        raise FormatError("manifest and tensor archive disagree on the pair count")
    specs = [ThreatSpec.from_dict(d) for d in manifest["threats"]]
    pairs = [CleanAdvPair(clean[i], adv[i], r["threat"], r["label"], r["success"], r["pair_id"])
             for i, r in enumerate(records)]
    return pairs, specs
