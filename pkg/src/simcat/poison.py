"""Clean-label poison crafting against a frozen encoder and the SimCat filtering defense.

The victim is a linear softmax head fit on encoder embeddings of a small
fine-tuning set plus a handful of poisons that carry their base-class label.
A poisoning succeeds when the victim assigns the target to the base class.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoders import embed
from .errors import AttackError, DegenerateDefenseError, FormatError, InvalidInputError
from .heads import LabeledEmbeddingSet, classify, ensemble_detect, fit_classifier, fit_detector
from .solver import SolverConfig

CRAFTABLE = ("FC", "BP")
# poison types accepted from external archives
KINDS = CRAFTABLE + ("CP", "CLBD", "HTBD")


@dataclass(frozen=True)
class PoisonSpec:
    """Crafting hyperparameters; the defaults follow the transfer-learning poisoning benchmark."""

    kind: str = "BP"
    epsilon: float = 8 / 255
    iterations: int = 1200
    step_size: float = 0.04
    watermark: float = 0.0
    betas: tuple = (0.9, 0.999)
    poisons_per_target: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"poison kind must be one of {KINDS}")
        if not self.epsilon >= 0 or self.iterations < 0 or not self.step_size > 0:
            raise InvalidInputError("need epsilon >= 0, iterations >= 0 and step_size > 0")
        if not 0 <= self.watermark <= 1:
            raise InvalidInputError("watermark coefficient must lie in [0, 1]")
        if self.poisons_per_target < 1:
            raise InvalidInputError("poisons_per_target must be >= 1")

    def to_dict(self):
        return {"kind": self.kind, "epsilon": self.epsilon, "iterations": self.iterations,
                "step_size": self.step_size, "watermark": self.watermark, "betas": list(self.betas),
                "poisons_per_target": self.poisons_per_target}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


FC_SPEC = PoisonSpec("FC", iterations=120, step_size=0.001, watermark=0.3)
BP_SPEC = PoisonSpec("BP", iterations=1200, step_size=0.04)


@dataclass(eq=False)
class PoisonSet:
    """One target with its poisons.

    ``anchors`` are the images each poison's budget is measured from: the
    base itself, or for watermarked feature collision the blend
    ``(1 - gamma) * base + gamma * target``.
    """

    target: np.ndarray
    target_id: str
    base_class: int
    true_class: int
    poisons: np.ndarray
    bases: np.ndarray
    anchors: np.ndarray
    poison_ids: list
    spec: PoisonSpec
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def kind(self):
        return self.spec.kind

    def __len__(self):
        return len(self.poisons)

    def embeddings(self, encoder):
        """``(target embedding, poison embeddings)``, memoized per encoder."""
        key = id(encoder)
        if key not in self._cache:
            pe = embed(encoder, self.poisons) if len(self.poisons) else np.zeros((0, encoder.embed_dim))
            self._cache[key] = (embed(encoder, self.target), pe)
        return self._cache[key]

    def within_budget(self, tol=1e-6):
        if not len(self.poisons):
            return True
        diff = np.abs(self.poisons.astype(np.float64) - self.anchors.astype(np.float64)).max()
        return bool(diff <= self.spec.epsilon + tol and self.poisons.min() >= -tol and self.poisons.max() <= 1 + tol)

    def subset(self, idx):
        idx = list(idx)
        return PoisonSet(self.target, self.target_id, self.base_class, self.true_class, self.poisons[idx],
                         self.bases[idx], self.anchors[idx], [self.poison_ids[i] for i in idx], self.spec)


# ---------------------------------------------------------------------------
# crafting

def _project(p, anchor, eps):
    return torch.minimum(torch.maximum(p, anchor - eps), anchor + eps).clamp(0, 1)


def feature_collision_objective(encoder, poisons, target):
    """Per-poison squared feature distance ``||phi(p) - phi(t)||^2`` (torch)."""
    with torch.no_grad():
        ft = encoder(target)
    return ((encoder(poisons) - ft) ** 2).sum(dim=1)


def craft_feature_collision(encoder, base, target, spec=FC_SPEC, history=None):
    """Feature-collision poison(s) for ``target`` from one base image or a batch of bases.

    Starts from the watermark blend ``(1 - gamma) * base + gamma * target``
    and runs projected gradient descent (step ``spec.step_size``) on the
    squared feature distance, inside the L-inf ball of radius ``epsilon``
    around that blend and the pixel box. Each poison keeps its closest
    iterate.
    """
    bases, single = encoder.prepare(base)
    t, _ = encoder.prepare(target)
    anchor = ((1 - spec.watermark) * bases + spec.watermark * t).clamp(0, 1)
    p = anchor.clone()
    best = p.clone()
    best_obj = feature_collision_objective(encoder, p, t).detach()
    if history is not None:
        history.append(float(best_obj.sum()))
    if spec.epsilon > 0:
        for step in range(spec.iterations):
            p.requires_grad_(True)
            obj = feature_collision_objective(encoder, p, t)
            (grad,) = torch.autograd.grad(obj.sum(), p)
            if not torch.all(torch.isfinite(grad)):
                raise AttackError("non-finite gradient while crafting feature collision", step=step)
            with torch.no_grad():
                p = _project(p - spec.step_size * grad, anchor, spec.epsilon)
                obj = feature_collision_objective(encoder, p, t)
                better = obj < best_obj
                best = torch.where(better.view(-1, 1, 1, 1), p, best)
                best_obj = torch.where(better, obj, best_obj)
                if history is not None:
                    history.append(float(best_obj.sum()))
    out = best.numpy()
    return (out[0], anchor.numpy()[0]) if single else (out, anchor.numpy())


def bullseye_objective(encoder, poisons, target):
    """``||mean_i phi(p_i) - phi(t)||^2`` (torch scalar)."""
    with torch.no_grad():
        ft = encoder(target)[0]
    return ((encoder(poisons).mean(dim=0) - ft) ** 2).sum()


def craft_bullseye(encoder, bases, target, spec=BP_SPEC, history=None):
    """Bullseye-polytope poisons: Adam on all poisons jointly so their mean feature hits the target.

    Each poison stays within ``epsilon`` (L-inf) of its base and inside the
    box; the lowest-objective iterate is returned.
    """
    b, _ = encoder.prepare(bases)
    if b.shape[0] < 1:
        raise InvalidInputError("bullseye crafting needs at least one base")
    t, _ = encoder.prepare(target)
    p = b.clone().requires_grad_(True)
    opt = torch.optim.Adam([p], lr=spec.step_size, betas=spec.betas)
    with torch.no_grad():
        best_obj = bullseye_objective(encoder, p, t)
    best = b.clone()
    if history is not None:
        history.append(float(best_obj))
    if spec.epsilon > 0:
        for step in range(spec.iterations):
            obj = bullseye_objective(encoder, p, t)
            opt.zero_grad()
            obj.backward()
            if not torch.all(torch.isfinite(p.grad)):
                raise AttackError("non-finite gradient while crafting bullseye poisons", step=step)
            opt.step()
            with torch.no_grad():
                p.copy_(_project(p, b, spec.epsilon))
                obj = bullseye_objective(encoder, p, t)
                if obj < best_obj:
                    best_obj, best = obj, p.detach().clone()
                if history is not None:
                    history.append(float(best_obj))
    return best.numpy()


def craft(encoder, bases, target, spec):
    """Dispatch on ``spec.kind``; returns ``(poisons, anchors)``."""
    bases = np.asarray(bases)
    if spec.kind not in CRAFTABLE:
        raise InvalidInputError(f"cannot craft {spec.kind} poisons; supply them as an archive")
    if spec.kind == "FC":
        return craft_feature_collision(encoder, bases, target, spec)
    return craft_bullseye(encoder, bases, target, spec), bases.copy()


def make_poison_sets(encoder, targets, target_labels, target_ids, base_pool, base_labels, base_ids, spec,
                     num_classes=None, seed=0):
    """Craft one :class:`PoisonSet` per target.

    The base class is drawn uniformly from the other classes and the bases
    are the ``poisons_per_target`` images of that class in ``base_pool``
    closest to the target in embedding space.
    """
    rng = np.random.default_rng(seed)
    base_labels = np.asarray(base_labels)
    k = int(num_classes or max(base_labels.max(), np.max(target_labels)) + 1)
    pool_emb = embed(encoder, base_pool)
    sets = []
    for target, y, tid in zip(targets, target_labels, target_ids):
        base_class = int(rng.choice([c for c in range(k) if c != int(y)]))
        cand = np.flatnonzero(base_labels == base_class)
        if len(cand) < spec.poisons_per_target:
            raise InvalidInputError(f"class {base_class} has only {len(cand)} base images")
        dist = np.linalg.norm(pool_emb[cand] - embed(encoder, target), axis=1)
        chosen = cand[np.argsort(dist, kind="stable")[: spec.poisons_per_target]]
        poisons, anchors = craft(encoder, base_pool[chosen], target, spec)
        sets.append(PoisonSet(np.asarray(target), str(tid), base_class, int(y), poisons.astype(np.float32),
                              np.asarray(base_pool[chosen]), anchors.astype(np.float32),
                              [f"{spec.kind}:{tid}:{base_ids[i]}" for i in chosen], spec))
    return sets


# ---------------------------------------------------------------------------
# victim training and defense

@dataclass
class TrialOutcome:
    success: bool
    clean_accuracy: float
    poisons_used: int


def run_poison_trial(clean, poison_set, encoder, test=None, lam=1.0, config=SolverConfig(), keep=None,
                     clean_mask=None, num_classes=None):
    """Fit the victim head on ``clean`` plus (a subset of) the poisons and query the target.

    ``clean`` and ``test`` are :class:`LabeledEmbeddingSet` objects of encoder
    embeddings. ``keep`` selects surviving poisons and ``clean_mask`` the
    surviving clean rows. Returns ``(success, clean_accuracy)`` as a
    :class:`TrialOutcome`; accuracy is NaN without a test set.
    """
    target_e, poison_e = poison_set.embeddings(encoder)
    if keep is not None:
        poison_e = poison_e[np.asarray(keep, dtype=bool)]
    X, y = clean.embeddings, clean.labels
    if clean_mask is not None:
        X, y = X[clean_mask], y[clean_mask]
    k = num_classes or int(max(clean.labels.max(), poison_set.base_class, poison_set.true_class)) + 1
    data = LabeledEmbeddingSet(np.concatenate([X, poison_e]),
                               np.concatenate([y, np.full(len(poison_e), poison_set.base_class)]))
    head = fit_classifier(data, lam=lam, config=config, num_classes=k)
    success = classify(head, target_e) == poison_set.base_class
    acc = float(np.mean(classify(head, test.embeddings) == test.labels)) if test is not None else float("nan")
    return TrialOutcome(bool(success), acc, len(poison_e))


@dataclass
class DefenseReport:
    poison_success_rate: float
    clean_accuracy: float
    false_positive_rate: float
    true_positive_rate: float
    trials: int
    evaluations: int
    per_trial: list = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def aggregate(cls, reports):
        reports = list(reports)
        if not reports:
            raise InvalidInputError("nothing to aggregate")
        mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))
        per_trial = [dict((k, v) for k, v in r.to_dict().items() if k != "per_trial") for r in reports]
        return cls(mean("poison_success_rate"), mean("clean_accuracy"), mean("false_positive_rate"),
                   mean("true_positive_rate"), sum(r.trials for r in reports),
                   sum(r.evaluations for r in reports), per_trial)


def evaluate_poisonings(finetune, poison_sets, encoder, test=None, lam=1.0, config=SolverConfig(), num_classes=None):
    """Undefended baseline: every poison and clean sample is used."""
    outcomes = [run_poison_trial(finetune, ps, encoder, test, lam, config, num_classes=num_classes)
                for ps in poison_sets]
    return DefenseReport(float(np.mean([o.success for o in outcomes])),
                         float(np.mean([o.clean_accuracy for o in outcomes])), 0.0, 0.0, 1, len(outcomes))


def defend(detectors, finetune, poison_sets, encoder, test=None, lam=1.0, config=SolverConfig(), num_classes=None):
    """Filter the fine-tuning set and every poison set with a detector ensemble, then retrain.

    ``detectors`` is one head or a list combined by the OR rule. Samples
    flagged 1 are removed before each poisoning is evaluated. Removing every
    clean sample, or every clean sample of some class, is a degenerate
    defense.
    """
    heads = detectors if isinstance(detectors, (list, tuple)) else [detectors]
    flagged = np.atleast_1d(ensemble_detect(heads, finetune.embeddings)).astype(bool)
    if flagged.all():
        raise DegenerateDefenseError("the detector flagged every clean sample")
    emptied = sorted(set(finetune.labels.tolist()) - set(finetune.labels[~flagged].tolist()))
    if emptied:
        raise DegenerateDefenseError(f"the detector flagged every clean sample of classes {emptied} "
                                     f"(false-positive rate {flagged.mean():.3f})")
    outcomes, caught, total = [], 0, 0
    for ps in poison_sets:
        _, pe = ps.embeddings(encoder)
        keep = ~np.atleast_1d(ensemble_detect(heads, pe)).astype(bool) if len(pe) else np.zeros(0, bool)
        caught += int((~keep).sum())
        total += len(keep)
        outcomes.append(run_poison_trial(finetune, ps, encoder, test, lam, config, keep=keep, clean_mask=~flagged,
                                         num_classes=num_classes))
    return DefenseReport(float(np.mean([o.success for o in outcomes])),
                         float(np.mean([o.clean_accuracy for o in outcomes])), float(flagged.mean()),
                         caught / total if total else 0.0, 1, len(outcomes))


def _select_poisons(train_sets, encoder, n_targets, seed):
    """``n_targets`` random training sets and one random poison from each: ``(poisons, targets, target ids)``."""
    rng = np.random.default_rng(seed)
    train_sets = list(train_sets)
    if len(train_sets) < n_targets:
        raise InvalidInputError(f"need {n_targets} training poison sets, got {len(train_sets)}")
    picks = rng.choice(len(train_sets), n_targets, replace=False)
    poisons, targets = [], []
    for i in picks:
        te, pe = train_sets[i].embeddings(encoder)
        poisons.append(pe[rng.integers(len(pe))])
        targets.append(te)
    return np.stack(poisons), np.stack(targets), [train_sets[i].target_id for i in picks]


def fit_poison_detector(train_sets, encoder, n_targets=10, seed=0, lam=1.0, config=SolverConfig(),
                        clean=None):
    """Detector from ``n_targets`` random training sets, one random poison each.

    The clean side is the selected targets themselves unless ``clean``
    embeddings are given. Returns ``(head, used_target_ids)``.
    """
    poisons, targets, ids = _select_poisons(train_sets, encoder, n_targets, seed)
    neg = targets if clean is None else np.asarray(clean)
    head = fit_detector(LabeledEmbeddingSet.detection(neg, poisons), lam=lam, config=config)
    return head, ids


def fit_general_detector(train_sets_by_kind, clean, encoder, n_targets=10, seeds=None, clean_seed=0, lam=1.0,
                         config=SolverConfig()):
    """Detector over the poisons of every kind, with clean samples other than the targets.

    ``seeds[kind]`` reproduces a poison-specific detector's selection, so the
    general and ensemble detectors of one trial share their poisons. The
    clean side is drawn uniformly without replacement from the rows of
    ``clean`` (one per poison). Returns ``(head, used_target_ids,
    used_clean_rows)``.
    """
    clean = np.asarray(clean)
    seeds = seeds or {}
    poisons, ids = [], []
    for kind, sets in sorted(train_sets_by_kind.items()):
        pe, _, used = _select_poisons(sets, encoder, n_targets, seeds.get(kind, 0))
        poisons.append(pe)
        ids += used
    poisons = np.concatenate(poisons)
    if len(clean) < len(poisons):
        raise InvalidInputError(f"need {len(poisons)} clean samples, got {len(clean)}")
    rows = np.sort(np.random.default_rng(clean_seed).choice(len(clean), len(poisons), replace=False))
    head = fit_detector(LabeledEmbeddingSet.detection(clean[rows], poisons), lam=lam, config=config)
    return head, ids, rows.tolist()


def check_separation(train_sets, eval_sets):
    """Raise unless training and evaluation poison sets share no target or poison id."""
    ids = lambda sets: {s.target_id for s in sets} | {p for s in sets for p in s.poison_ids}
    shared = ids(train_sets) & ids(eval_sets)
    if shared:
        raise InvalidInputError(f"training and evaluation poison sets overlap: {sorted(shared)[:5]}")


def _trial_seed(seed, trial, j):
    return seed * 1000 + trial * 10 + j


def defense_trials(train_sets_by_kind, eval_sets, finetune, encoder, test=None, trials=5, n_targets=10, seed=0,
                   lam=1.0, config=SolverConfig(), num_classes=None):
    """Per trial, fit one detector per poison kind and evaluate their OR-ensemble with :func:`defend`."""
    for sets in train_sets_by_kind.values():
        check_separation(sets, eval_sets)
    reports, detectors = [], []
    for trial in range(trials):
        heads = [fit_poison_detector(sets, encoder, n_targets, seed=_trial_seed(seed, trial, j), lam=lam,
                                     config=config)[0]
                 for j, (_, sets) in enumerate(sorted(train_sets_by_kind.items()))]
        detectors.append(heads)
        reports.append(defend(heads, finetune, eval_sets, encoder, test, lam, config, num_classes))
    return DefenseReport.aggregate(reports), detectors


def general_defense_trials(train_sets_by_kind, eval_sets, finetune, encoder, test=None, trials=5, n_targets=10,
                           seed=0, lam=1.0, config=SolverConfig(), num_classes=None):
    """Like :func:`defense_trials` with the general detector; trial ``t`` reuses the ensemble's poisons.

    Returns ``(report, clean rows used per trial)``.
    """
    for sets in train_sets_by_kind.values():
        check_separation(sets, eval_sets)
    reports, clean_rows = [], []
    for trial in range(trials):
        seeds = {kind: _trial_seed(seed, trial, j) for j, kind in enumerate(sorted(train_sets_by_kind))}
        head, _, rows = fit_general_detector(train_sets_by_kind, finetune.embeddings, encoder, n_targets, seeds,
                                             clean_seed=_trial_seed(seed, trial, 9), lam=lam, config=config)
        clean_rows.append(rows)
        reports.append(defend(head, finetune, eval_sets, encoder, test, lam, config, num_classes))
    return DefenseReport.aggregate(reports), clean_rows


# ---------------------------------------------------------------------------
# archives

def save_poison_sets(directory, sets):
    """One sub-directory per set holding ``images.npz`` and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, ps in enumerate(sets):
        sub = directory / f"{i:04d}_{ps.kind}"
        sub.mkdir(exist_ok=True)
        np.savez_compressed(sub / "images.npz", target=ps.target, poisons=ps.poisons, bases=ps.bases,
                            anchors=ps.anchors)
        manifest = {"target_id": ps.target_id, "base_class": ps.base_class, "true_class": ps.true_class,
                    "poison_ids": ps.poison_ids, "epsilon": ps.spec.epsilon, "type": ps.kind,
                    "spec": ps.spec.to_dict()}
        (sub / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_poison_sets(directory):
    """Read archives written by :func:`save_poison_sets` (or supplied externally in the same layout).

    External archives may omit ``bases``/``anchors`` and ``spec``; anchors
    then default to the poisons themselves.
    """
    sets = []
    for sub in sorted(p for p in Path(directory).iterdir() if p.is_dir()):
        try:
            manifest = json.loads((sub / "manifest.json").read_text())
            arrays = np.load(sub / "images.npz")
            poisons = arrays["poisons"]
            spec_doc = manifest.get("spec") or {"kind": manifest["type"], "epsilon": manifest["epsilon"]}
            ps = PoisonSet(arrays["target"], manifest["target_id"], int(manifest["base_class"]),
                           int(manifest["true_class"]), poisons,
                           arrays["bases"] if "bases" in arrays else poisons,
                           arrays["anchors"] if "anchors" in arrays else poisons,
                           list(manifest["poison_ids"]), PoisonSpec.from_dict(spec_doc))
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"cannot read poison archive {sub}: {exc}") from exc
        if len(ps.poison_ids) != len(ps.poisons):
            raise FormatError(f"{sub}: manifest lists {len(ps.poison_ids)} poisons, archive has {len(ps.poisons)}")
        sets.append(ps)
    return sets
