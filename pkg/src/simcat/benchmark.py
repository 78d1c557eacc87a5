"""Desk-scale benchmark: toy shapes, a base classifier, two encoders, attack pairs and poisons.

Building it takes a few CPU minutes, so :func:`load_or_build` caches every
artifact under a directory keyed by a hash of the configuration.
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import PGD_L2, PGD_LINF, ThreatSpec, load_pairs, make_pairs, save_pairs
from .augment import AugmentPolicy
from .datasets import make_shapes
from .encoders import (BaseClassifier, ContrastiveConfig, SupervisedConfig, config_dict, embed, load_encoder,
                       save_encoder, train_contrastive_encoder, train_supervised_encoder)
from .heads import LabeledEmbeddingSet
from .poison import BP_SPEC, FC_SPEC, load_poison_sets, make_poison_sets, save_poison_sets

log = logging.getLogger(__name__)

WIDTHS = (16, 32, 64)
BENCH_POLICY = AugmentPolicy(crop_scale=(0.3, 1.0), flip_prob=0.5, jitter=0.4, grayscale_prob=0.2,
                             interpolation="nearest")
# CW with a finite L2 bound so every pair has a well-defined budget
CW_BENCH = ThreatSpec("CW-L2", "L2", 2.0, 0.01, 100, cw_constant=0.25)
COLOR_BENCH = ThreatSpec("ColorShift", "ColorShift", 0.1, 0.02, 10)


@dataclass(frozen=True)
class BenchmarkConfig:
    image_size: int = 16
    train_per_class: int = 300
    attack_per_class: int = 80
    noise: float = 0.0
    seed: int = 0
    classifier: SupervisedConfig = field(default_factory=lambda: SupervisedConfig(
        epochs=20, lr=3e-3, widths=WIDTHS, embed_dim=None, seed=0))
    baseline: SupervisedConfig = field(default_factory=lambda: SupervisedConfig(
        epochs=20, lr=3e-3, widths=WIDTHS, embed_dim=None, seed=7))
    contrastive: ContrastiveConfig = field(default_factory=lambda: ContrastiveConfig(
        epochs=150, lr=1e-2, widths=WIDTHS, embed_dim=112, augmentation=BENCH_POLICY))
    threats: tuple = (PGD_L2, PGD_LINF, CW_BENCH, COLOR_BENCH)
    # poisoning
    finetune_per_class: int = 50
    poison_sets_per_kind: int = 40
    poison_specs: tuple = (FC_SPEC, BP_SPEC)

    def to_dict(self):
        return {"image_size": self.image_size, "train_per_class": self.train_per_class,
                "attack_per_class": self.attack_per_class, "noise": self.noise, "seed": self.seed,
                "classifier": config_dict(self.classifier), "baseline": config_dict(self.baseline),
                "contrastive": config_dict(self.contrastive), "threats": [t.to_dict() for t in self.threats],
                "finetune_per_class": self.finetune_per_class, "poison_sets_per_kind": self.poison_sets_per_kind,
                "poison_specs": [s.to_dict() for s in self.poison_specs]}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass(eq=False)
class Benchmark:
    config: BenchmarkConfig
    classifier: BaseClassifier
    encoder: object
    baseline: BaseClassifier
    pairs: list
    specs: list
    poison: dict = None

    @property
    def threat_names(self):
        return [s.name for s in self.specs]


def _data(config, n_per_class, offset):
    return make_shapes(n_per_class, size=config.image_size, noise=config.noise, seed=config.seed + offset)


def build(config=BenchmarkConfig(), with_poisons=True):
    """Train the classifier, the contrastive encoder and the supervised baseline, then attack."""
    X, y = _data(config, config.train_per_class, 0)
    log.info("training base classifier")
    clf = train_supervised_encoder(X, y, config.classifier)
    log.info("training supervised baseline encoder")
    base = train_supervised_encoder(X, y, config.baseline)
    log.info("training contrastive encoder")
    enc = train_contrastive_encoder(X, config.contrastive)
    Xa, ya = _data(config, config.attack_per_class, 5)
    log.info("generating attacks")
    pairs = make_pairs(clf, Xa, ya, list(config.threats), seed=config.seed, id_prefix="atk")
    bench = Benchmark(config, clf, enc, base, pairs, list(config.threats))
    if with_poisons:
        bench.poison = build_poisons(config, enc)
    return bench


def build_poisons(config, encoder):
    """Fine-tuning set, test set and crafted FC/BP poison sets against ``encoder``."""
    Xf, yf = _data(config, config.finetune_per_class, 11)
    Xt, yt = _data(config, 50, 12)
    Xb, yb = _data(config, 30, 13)
    n_sets = config.poison_sets_per_kind
    Xg, yg = _data(config, -(-2 * n_sets // 10), 14)
    sets = {}
    for j, spec in enumerate(config.poison_specs):
        sel = slice(j * n_sets, (j + 1) * n_sets)
        log.info("crafting %s poisons", spec.kind)
        sets[spec.kind] = make_poison_sets(encoder, Xg[sel], yg[sel], [f"tgt{i}" for i in range(len(Xg))][sel],
                                           Xb, yb, [f"base{i}" for i in range(len(Xb))], spec,
                                           num_classes=10, seed=config.seed + j)
    return {"finetune": (Xf, yf), "test": (Xt, yt), "sets": sets}


def poison_embeddings(bench):
    """Fine-tune and test :class:`LabeledEmbeddingSet` objects under the contrastive encoder."""
    (Xf, yf), (Xt, yt) = bench.poison["finetune"], bench.poison["test"]
    return (LabeledEmbeddingSet(embed(bench.encoder, Xf), yf), LabeledEmbeddingSet(embed(bench.encoder, Xt), yt))


def save(bench, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_encoder(d / "classifier.pt", bench.classifier.encoder, bench.classifier.head)
    save_encoder(d / "baseline.pt", bench.baseline.encoder, bench.baseline.head)
    save_encoder(d / "contrastive.pt", bench.encoder)
    save_pairs(d / "pairs", bench.pairs, bench.specs)
    if bench.poison is not None:
        np.savez_compressed(d / "poison_data.npz", Xf=bench.poison["finetune"][0], yf=bench.poison["finetune"][1],
                            Xt=bench.poison["test"][0], yt=bench.poison["test"][1])
        for kind, sets in bench.poison["sets"].items():
            save_poison_sets(d / "poisons" / kind, sets)
    (d / "config.json").write_text(json.dumps(bench.config.to_dict(), indent=1))


def load(directory, config=BenchmarkConfig()):
    d = Path(directory)
    enc_c, head_c = load_encoder(d / "classifier.pt")
    enc_b, head_b = load_encoder(d / "baseline.pt")
    enc, _ = load_encoder(d / "contrastive.pt")
    pairs, specs = load_pairs(d / "pairs")
    poison = None
    if (d / "poison_data.npz").exists():
        arr = np.load(d / "poison_data.npz")
        poison = {"finetune": (arr["Xf"], arr["yf"]), "test": (arr["Xt"], arr["yt"]),
                  "sets": {p.name: load_poison_sets(p) for p in sorted((d / "poisons").iterdir())}}
    return Benchmark(config, BaseClassifier(enc_c, head_c), enc, BaseClassifier(enc_b, head_b), pairs, specs, poison)


def default_cache_dir():
    return Path(os.environ.get("SIMCAT_CACHE", Path.home() / ".cache" / "simcat"))


def load_or_build(config=BenchmarkConfig(), cache_dir=None):
    """Load the benchmark for ``config`` from the cache, building and saving it on a miss."""
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    d = root / f"bench-{config.digest()}"
    if (d / "config.json").exists():
        return load(d, config)
    bench = build(config)
    tmp = root / f".tmp-{config.digest()}"
    save(bench, tmp)
    tmp.rename(d)
    return load(d, config)
