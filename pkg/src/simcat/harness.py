"""Experiment protocols over clean/adversarial pairs.

Every protocol works on :class:`EmbeddedPairs` (embeddings computed once per
encoder) and derives per-trial random streams from a master seed, so
reports are reproducible and independent of execution order.
"""
import csv
import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import embed
from .errors import InvalidInputError, TrainingDivergedError, UndefinedCorrelationError
from .heads import LabeledEmbeddingSet, classify, detect, fit_classifier, fit_detector
from .solver import SolverConfig


def trial_rng(seed, *keys):
    """Independent generator for one (seed, keys...) cell."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


# ---------------------------------------------------------------------------
# splits

def pair_preserving_split(pairs, n_train_per_attack, seed=0):
    """Split pairs so each threat contributes exactly ``n_train_per_attack`` training pairs.

    A pair's clean and adversarial images always land on the same side.
    Pairs sharing a ``pair_id`` with any training pair (the same clean image
    attacked under another threat) never appear in the test side.
    """
    pairs = list(pairs)
    by_threat = {}
    for i, p in enumerate(pairs):
        by_threat.setdefault(p.threat, []).append(i)
    rng = trial_rng(seed)
    train_idx = []
    for t in sorted(by_threat):
        idx = by_threat[t]
        if n_train_per_attack > len(idx):
            raise InvalidInputError(f"threat {t} has {len(idx)} pairs, {n_train_per_attack} requested")
        if n_train_per_attack < 0:
            raise InvalidInputError("n_train_per_attack must be >= 0")
        train_idx.extend(np.asarray(idx)[rng.permutation(len(idx))[:n_train_per_attack]].tolist())
    train_ids = {pairs[i].pair_id for i in train_idx}
    chosen = set(train_idx)
    train = [pairs[i] for i in sorted(chosen)]
    test = [p for i, p in enumerate(pairs) if i not in chosen and p.pair_id not in train_ids]
    return train, test


@dataclass(eq=False)
class EmbeddedPairs:
    """Clean and adversarial embeddings of a pair list, row-aligned."""

    clean: np.ndarray
    adv: np.ndarray
    threats: np.ndarray
    ids: list
    threat_names: list
    success: np.ndarray = None

    def __len__(self):
        return len(self.threats)

    @classmethod
    def from_pairs(cls, pairs, encoder, threat_names=None):
        pairs = list(pairs)
        if not pairs:
            raise InvalidInputError("no pairs to embed")
        threats = np.array([p.threat for p in pairs])
        names = list(threat_names) if threat_names is not None else [str(t) for t in range(threats.max() + 1)]
        return cls(embed(encoder, np.stack([p.clean for p in pairs])),
                   embed(encoder, np.stack([p.adv for p in pairs])), threats,
                   [p.pair_id for p in pairs], names, np.array([p.success for p in pairs]))

    def indices(self, threat):
        return np.flatnonzero(self.threats == threat)

    @property
    def threat_ids(self):
        return sorted(set(self.threats.tolist()))


def _split_indices(ep, n, rng, threats=None):
    """Per-threat random choice of ``n`` training rows; the rest (per threat) are test rows."""
    train, test = [], []
    for t in (threats if threats is not None else ep.threat_ids):
        idx = ep.indices(t)
        if n > len(idx):
            raise InvalidInputError(f"threat {ep.threat_names[t]} has {len(idx)} pairs, {n} requested")
        perm = idx[rng.permutation(len(idx))]
        train.append(perm[:n])
        test.append(perm[n:])
    return np.concatenate(train), np.concatenate(test)


def _detection_set(ep, idx, unpaired=False):
    if unpaired:
        # clean side from one half of the rows, adversarial side from the other
        half = len(idx) // 2
        return LabeledEmbeddingSet.detection(ep.clean[idx[:half]], ep.adv[idx[half:2 * half]])
    return LabeledEmbeddingSet.detection(ep.clean[idx], ep.adv[idx])


# ---------------------------------------------------------------------------
# reports

@dataclass
class TrialReport:
    """Accuracy over repeated splits at one training size.

    ``confusion`` sums the per-trial confusion matrices (rows = true class);
    ``test_counts`` sums the per-trial test counts of each class.
    """

    task: str
    threats: list
    samples_per_attack: int
    trials: int
    mean_accuracy: float
    accuracies: list
    confusion: list
    test_counts: list
    seed: int
    std_accuracy: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_trials(cls, task, threats, n, accuracies, confusions, seed, **extra):
        conf = np.sum(confusions, axis=0).astype(int)
        return cls(task, list(threats), int(n), len(accuracies), float(np.mean(accuracies)),
                   [float(a) for a in accuracies], conf.tolist(), conf.sum(axis=1).tolist(), int(seed),
                   float(np.std(accuracies)), extra)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def csv_rows(self):
        return [{"task": self.task, "samples_per_attack": self.samples_per_attack, "trial": i, "accuracy": a,
                 "seed": self.seed, "threats": "|".join(self.threats)} for i, a in enumerate(self.accuracies)]


def write_reports(path_prefix, reports):
    """Write ``<prefix>.json``, ``<prefix>.csv`` (one row per trial) and one confusion CSV per size."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = [prefix.with_suffix(".json"), prefix.with_suffix(".csv")]
    written[0].write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    rows = [row for r in reports for row in r.csv_rows()]
    with open(written[1], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "samples_per_attack", "trial", "accuracy", "seed", "threats"])
        writer.writeheader()
        writer.writerows(rows)
    for r in reports:
        path = prefix.parent / f"{prefix.name}_confusion_{r.task}_n{r.samples_per_attack}.csv"
        labels = r.threats if r.task == "classification" else ["clean", "adversarial"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + labels)
            for name, row in zip(labels, r.confusion):
                writer.writerow([name] + row)
        written.append(path)
    return written


def _confusion(true, pred, k):
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return m


# ---------------------------------------------------------------------------
# trial protocols

def run_detection_trials(ep, sizes, trials=10, lam=1.0, seed=0, threats=None, config=SolverConfig(),
                         unpaired=False):
    """Detector accuracy on balanced held-out clean/adversarial sets, per training size.

    Training draws ``n`` pairs from each threat in ``threats`` (all by
    default), i.e. ``2 * n * len(threats)`` images.
    """
    threats = ep.threat_ids if threats is None else list(threats)
    reports = []
    for n in sizes:
        accs, confs = [], []
        for trial in range(trials):
            rng = trial_rng(seed, n, trial)
            tr, te = _split_indices(ep, n, rng, threats)
            if len(te) == 0:
                raise InvalidInputError(f"no test pairs left at size {n}")
            head = fit_detector(_detection_set(ep, tr, unpaired), lam=lam, config=config)
            test = _detection_set(ep, te, unpaired)
            pred = detect(head, test.embeddings)
            confs.append(_confusion(test.labels, pred, 2))
            accs.append(float(np.mean(pred == test.labels)))
        reports.append(TrialReport.from_trials("detection", [ep.threat_names[t] for t in threats], n, accs, confs,
                                               seed, lam=lam))
    return reports


def run_classification_trials(ep, sizes, trials=10, lam=1.0, seed=0, threats=None, config=SolverConfig()):
    """k-way threat classification of adversarial embeddings; reports carry k x k confusions."""
    threats = ep.threat_ids if threats is None else list(threats)
    if len(threats) < 2:
        raise InvalidInputError("classification needs at least two threats")
    relabel = {t: i for i, t in enumerate(threats)}
    y_all = np.array([relabel.get(t, -1) for t in ep.threats])
    reports = []
    for n in sizes:
        accs, confs = [], []
        for trial in range(trials):
            tr, te = _split_indices(ep, n, trial_rng(seed, n, trial), threats)
            if len(te) == 0:
                raise InvalidInputError(f"no test samples left at size {n}")
            head = fit_classifier(LabeledEmbeddingSet(ep.adv[tr], y_all[tr]), lam=lam, config=config,
                                  num_classes=len(threats))
            pred = classify(head, ep.adv[te])
            confs.append(_confusion(y_all[te], pred, len(threats)))
            accs.append(float(np.mean(pred == y_all[te])))
        reports.append(TrialReport.from_trials("classification", [ep.threat_names[t] for t in threats], n, accs,
                                               confs, seed, lam=lam))
    return reports


@dataclass
class GeneralizationResult:
    """Rows are training regimes, columns held-out threats; entries are mean accuracies.

    ``matrix[i][j]`` for ``i < k`` is a detector trained on threat ``i`` only
    and ``matrix[k][j]`` the detector trained on every threat except ``j``.
    """

    threats: list
    n_single: int
    n_union: int
    trials: int
    matrix: list
    per_trial: list
    seed: int

    @property
    def single_unseen_average(self):
        """Mean over single-threat rows of the off-diagonal entries."""
        m = np.asarray(self.matrix)[:-1]
        k = m.shape[0]
        return float(m[~np.eye(k, dtype=bool)].mean())

    @property
    def union_average(self):
        return float(np.mean(self.matrix[-1]))

    def trial_values(self):
        """Per-trial ``(single unseen average, union average)``."""
        out = []
        for m in self.per_trial:
            m = np.asarray(m)
            k = m.shape[1]
            out.append((float(m[:-1][~np.eye(k, dtype=bool)].mean()), float(m[-1].mean())))
        return out

    def to_dict(self):
        d = asdict(self)
        d["single_unseen_average"] = self.single_unseen_average
        d["union_average"] = self.union_average
        return d


def leave_one_out_generalization(ep, n_single, n_union, trials=10, lam=1.0, seed=0, config=SolverConfig()):
    """Single-threat detectors versus leave-one-threat-out union detectors.

    In each trial every threat's pairs are shuffled once; the first
    ``max(n_single, n_union)`` are the training pool and the rest the test
    set shared by all regimes.
    """
    threats = ep.threat_ids
    k = len(threats)
    if k < 2:
        raise InvalidInputError("generalization needs at least two threats")
    n_pool = max(n_single, n_union)
    per_trial = []
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        pool, test = {}, {}
        for t in threats:
            idx = ep.indices(t)
            if len(idx) <= n_pool:
                raise InvalidInputError(f"threat {ep.threat_names[t]} needs more than {n_pool} pairs")
            perm = idx[rng.permutation(len(idx))]
            pool[t], test[t] = perm[:n_pool], perm[n_pool:]

        def accuracy(head, t):
            s = _detection_set(ep, test[t])
            return float(np.mean(detect(head, s.embeddings) == s.labels))

        m = np.zeros((k + 1, k))
        for i, t in enumerate(threats):
            head = fit_detector(_detection_set(ep, pool[t][:n_single]), lam=lam, config=config)
            m[i] = [accuracy(head, u) for u in threats]
        for j, u in enumerate(threats):
            idx = np.concatenate([pool[t][:n_union] for t in threats if t != u])
            m[k, j] = accuracy(fit_detector(_detection_set(ep, idx), lam=lam, config=config), u)
        per_trial.append(m.tolist())
    return GeneralizationResult([ep.threat_names[t] for t in threats], n_single, n_union, trials,
                                np.mean(per_trial, axis=0).tolist(), per_trial, seed)


# ---------------------------------------------------------------------------
# fine-tuned baseline

@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    average_last: int = 10

    def __post_init__(self):
        if self.epochs < self.average_last or self.average_last < 1:
            raise InvalidInputError(f"epochs must be >= {self.average_last} so the final-epoch average exists")


@dataclass
class FinetuneResult:
    accuracy: float
    log: list


def finetuned_baseline(train, test, encoder, config=FinetuneConfig(), num_classes=None):
    """Fine-tune a copy of ``encoder`` plus a fresh linear layer end to end with SGD.

    ``train`` and ``test`` are ``(images, labels)`` tuples. The reported
    accuracy is the mean test accuracy over the final ``average_last``
    epochs; ``log`` holds every epoch's loss and test accuracy.
    """
    x_tr, y_tr = np.asarray(train[0]), np.asarray(train[1], dtype=np.int64)
    x_te, y_te = np.asarray(test[0]), np.asarray(test[1], dtype=np.int64)
    k = int(num_classes or max(y_tr.max(), y_te.max()) + 1)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        module = copy.deepcopy(encoder.module).float()
        linear = nn.Linear(encoder.embed_dim, k)
    for p in module.parameters():
        p.requires_grad_(True)
    params = list(module.parameters()) + list(linear.parameters())
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    xt = torch.as_tensor(x_tr, dtype=torch.float32).permute(0, 3, 1, 2)
    xe = torch.as_tensor(x_te, dtype=torch.float32).permute(0, 3, 1, 2)
    yt, ye = torch.as_tensor(y_tr), torch.as_tensor(y_te)
    rng = np.random.default_rng(config.seed)
    log = []
    for epoch in range(config.epochs):
        module.train()
        order = rng.permutation(len(y_tr))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            loss = F.cross_entropy(linear(module(xt[idx])), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"fine-tuning loss is {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        module.eval()
        with torch.no_grad():
            acc = float((linear(module(xe)).argmax(dim=1) == ye).float().mean())
        log.append({"epoch": epoch + 1, "loss": total / len(y_tr), "test_accuracy": acc})
    final = [row["test_accuracy"] for row in log[-config.average_last:]]
    return FinetuneResult(float(np.mean(final)), log)


def detection_images(pairs):
    """``(images, labels)`` with clean images labelled 0 and adversarial ones 1."""
    pairs = list(pairs)
    return (np.concatenate([np.stack([p.clean for p in pairs]), np.stack([p.adv for p in pairs])]),
            np.repeat([0, 1], len(pairs)))


def classification_images(pairs):
    """``(adversarial images, threat labels)``."""
    pairs = list(pairs)
    return np.stack([p.adv for p in pairs]), np.array([p.threat for p in pairs])


# ---------------------------------------------------------------------------
# perceptibility statistics

def pearson(x, y):
    """Pearson correlation coefficient; raises when either coordinate has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError("pearson needs two equal-length 1-D sequences")
    if len(x) < 2:
        raise UndefinedCorrelationError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("zero variance in one coordinate")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def _summary(values):
    values = np.asarray(values, dtype=np.float64)
    q = np.quantile(values, [0.05, 0.25, 0.5, 0.75, 0.95]) if len(values) else [math.nan] * 5
    return {"mean": float(values.mean()) if len(values) else math.nan,
            "q05": float(q[0]), "q25": float(q[1]), "median": float(q[2]), "q75": float(q[3]), "q95": float(q[4])}


def distance_distributions(pairs, encoder, threat_names=None):
    """Per-threat summaries of pixel-space and embedding-space L2 distances between clean and adversarial images."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("no pairs given")
    clean = np.stack([p.clean for p in pairs]).astype(np.float64)
    adv = np.stack([p.adv for p in pairs]).astype(np.float64)
    pix = np.linalg.norm((adv - clean).reshape(len(pairs), -1), axis=1)
    emb = np.linalg.norm(embed(encoder, adv.astype(np.float32)).astype(np.float64)
                         - embed(encoder, clean.astype(np.float32)), axis=1)
    threats = np.array([p.threat for p in pairs])
    out = {}
    for t in sorted(set(threats.tolist())):
        name = threat_names[t] if threat_names is not None else str(t)
        sel = threats == t
        out[name] = {"count": int(sel.sum()), "pixel_l2": _summary(pix[sel]), "embedding_l2": _summary(emb[sel]),
                     "pixel_values": pix[sel].tolist(), "embedding_values": emb[sel].tolist()}
    return out


PERCEPT_FIELDS = ("threat", "bound_level", "mean_perceptibility", "mean_embedding_distance")


@dataclass
class CorrelationReport:
    points: list
    r: float
    r_excluding: float
    excluded: list

    def to_dict(self):
        return asdict(self)


def load_perceptibility_csv(path):
    """Rows of ``threat,bound_level,mean_perceptibility,mean_embedding_distance``."""
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    missing = [f for f in PERCEPT_FIELDS if f not in (reader.fieldnames or [])]
    if missing:
        raise InvalidInputError(f"perceptibility CSV lacks columns {missing}")
    points = []
    for row in reader:
        try:
            points.append({"threat": row["threat"], "bound_level": row["bound_level"],
                           "mean_perceptibility": float(row["mean_perceptibility"]),
                           "mean_embedding_distance": float(row["mean_embedding_distance"])})
        except ValueError as exc:
            raise InvalidInputError(f"bad perceptibility row {row}: {exc}") from exc
    return points


def correlation_report(points, exclude="color"):
    """Pearson r of embedding distance vs perceptibility, overall and without threats matching ``exclude``.

    ``exclude`` is a case-insensitive substring of the threat name.
    """
    d = [p["mean_embedding_distance"] for p in points]
    s = [p["mean_perceptibility"] for p in points]
    kept = [p for p in points if exclude.lower() not in p["threat"].lower()]
    excluded = sorted({p["threat"] for p in points} - {p["threat"] for p in kept})
    r_ex = pearson([p["mean_embedding_distance"] for p in kept], [p["mean_perceptibility"] for p in kept])
    return CorrelationReport(list(points), pearson(d, s), r_ex, excluded)
