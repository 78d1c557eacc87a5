"""``simcat`` command-line entry point.

Every subcommand reads one JSON config (see :func:`simcat.config.validate_config`),
writes its reports under ``--out`` and finishes with a ``manifest.json``.
Exit codes: 0 success, 1 configuration or runtime error, 2 usage error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import SUBCOMMANDS, apply_env, load_config, run_manifest, validate_config
from .errors import ConfigError, SimCatError

log = logging.getLogger("simcat")

HELP = {
    "train-encoder": "train a contrastive (NT-Xent, temperature 0.5) or supervised toy encoder",
    "gen-attacks": "attack a base classifier and write clean/adversarial pairs",
    "fit": "fit a detector or threat classifier (lambda 1, L-BFGS, tol 1e-3, 1500 iterations) on embeddings",
    "eval": "detection / classification accuracy over repeated pair-preserving splits (10 trials)",
    "generalize": "single-threat versus leave-one-out union detectors",
    "adv-train": "momentum adversarial training (20 epochs, beta 100, adaptive PGD-L2 eps 2.0, 20 x 0.05)",
    "poison-defend": "filter poisons with an ensemble of poison-specific detectors and a general detector",
    "percept": "embedding-distance statistics and perceptibility correlation",
}


def _json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, default=_default))


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class Context:
    """Lazily resolved inputs shared by the subcommand handlers."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self._bench = None

    @property
    def lam(self):
        return self.cfg.solver["lambda"]

    def solver(self):
        from .solver import SolverConfig
        s = self.cfg.solver
        return SolverConfig(s["max_iterations"], s["tolerance"], s["history"])

    def bench(self):
        if self._bench is None:
            from .benchmark import load_or_build
            b = self.cfg.benchmark or {}
            self._bench = load_or_build(cache_dir=b.get("cache"))
        return self._bench

    def encoder(self):
        from .encoders import load_encoder
        e = self.cfg.encoder
        if e["path"]:
            return load_encoder(e["path"])[0]
        bench = self.bench()
        return bench.encoder if e["kind"] == "contrastive" else bench.baseline.encoder

    def classifier(self):
        from .encoders import BaseClassifier, load_encoder
        if self.cfg.classifier:
            enc, head = load_encoder(self.cfg.classifier)
            if head is None:
                raise ConfigError("classifier", "encoder file carries no classification head")
            return BaseClassifier(enc, head)
        return self.bench().classifier

    def pairs(self):
        from .attacks import load_pairs
        if self.cfg.data.get("pairs"):
            return load_pairs(self.cfg.data["pairs"])
        bench = self.bench()
        return bench.pairs, bench.specs

    def embedded_pairs(self):
        from .harness import EmbeddedPairs
        if self.cfg.encoder["source"] == "load-cache":
            return _cached_pairs(self.cfg)
        pairs, specs = self.pairs()
        return EmbeddedPairs.from_pairs(pairs, self.encoder(), [s.name for s in specs])


def _cached_pairs(cfg):
    """Pairs from a precomputed embedding cache: ids ``<pair>/clean`` and ``<pair>/adv`` plus a threat map."""
    from .encoders import load_embeddings
    from .harness import EmbeddedPairs
    if not cfg.data.get("embeddings") or not cfg.data.get("labels"):
        raise ConfigError("data.labels", "load-cache needs data.embeddings and a data.labels threat map")
    ids, matrix = load_embeddings(cfg.data["embeddings"])
    meta = json.loads(Path(cfg.data["labels"]).read_text())
    threat_of = meta["threats"] if "threats" in meta else meta
    names = meta.get("threat_names") if "threats" in meta else None
    row = {i: r for r, i in enumerate(ids)}
    order = sorted(threat_of)
    try:
        clean = matrix[[row[f"{p}/clean"] for p in order]]
        adv = matrix[[row[f"{p}/adv"] for p in order]]
    except KeyError as exc:
        raise ConfigError("data.embeddings", f"missing embedding for {exc}") from exc
    threats = np.array([int(threat_of[p]) for p in order])
    names = names or [str(t) for t in range(threats.max() + 1)]
    return EmbeddedPairs(clean.astype(np.float64), adv.astype(np.float64), threats, order, names)


# ---------------------------------------------------------------------------
# handlers

def cmd_train_encoder(ctx):
    from .datasets import load_image_tensor
    from .encoders import (ContrastiveConfig, SupervisedConfig, config_dict, save_encoder, train_contrastive_encoder,
                           train_supervised_encoder)
    cfg, e = ctx.cfg, ctx.cfg.encoder
    images, labels = load_image_tensor(cfg.data["images"])
    if e["kind"] == "contrastive":
        config = ContrastiveConfig(temperature=e["temperature"], batch_size=e["batch_size"], epochs=e["epochs"],
                                   projection_dim=e["projection_dim"], seed=cfg.seed, lr=e["lr"],
                                   embed_dim=e["embed_dim"])
        encoder, head, history = (lambda enc: (enc, None, enc.history))(train_contrastive_encoder(images, config))
    else:
        if labels is None:
            raise ConfigError("data.images", "supervised training needs an archive with labels")
        config = SupervisedConfig(epochs=e["epochs"], batch_size=e["batch_size"], seed=cfg.seed, lr=e["lr"],
                                  embed_dim=e["embed_dim"])
        clf = train_supervised_encoder(images, labels, config)
        encoder, head, history = clf.encoder, clf.head, clf.history
    save_encoder(ctx.out / "encoder.pt", encoder, head)
    _json(ctx.out / "training.json", {"config": config_dict(config), "loss_per_epoch": history})


def cmd_gen_attacks(ctx):
    from .attacks import ThreatSpec, make_pairs, perturbation_norm, save_pairs
    from .benchmark import BenchmarkConfig
    from .datasets import load_image_tensor
    images, labels = load_image_tensor(ctx.cfg.data["images"])
    if labels is None:
        raise ConfigError("data.images", "attacks need an archive with labels")
    specs = ([ThreatSpec.from_dict(t) for t in ctx.cfg.threats] if ctx.cfg.threats
             else list(BenchmarkConfig().threats))
    clf = ctx.classifier()
    pairs = make_pairs(clf, images, labels, specs, seed=ctx.cfg.seed)
    save_pairs(ctx.out / "pairs", pairs, specs)
    summary = {}
    for t, spec in enumerate(specs):
        ps = [p for p in pairs if p.threat == t]
        summary[spec.name] = {"count": len(ps), "success_rate": float(np.mean([p.success for p in ps])) if ps else None,
                              "mean_norm": float(np.mean([perturbation_norm(p.adv - p.clean, spec.norm) for p in ps]))
                              if ps else None}
    _json(ctx.out / "attacks.json", summary)


def _load_labeled(path, labels_path=None):
    """``(embeddings, labels)`` from a JSON fixture or an embedding cache plus labels file."""
    from .encoders import load_embeddings
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        try:
            return np.asarray(doc["embeddings"], dtype=np.float64), np.asarray(doc["labels"], dtype=np.int64)
        except KeyError as exc:
            raise ConfigError("data.embeddings", f"fixture lacks {exc}") from exc
    _, matrix = load_embeddings(path)
    if labels_path is None:
        raise ConfigError("data.labels", "required with an embedding cache")
    lp = Path(labels_path)
    labels = np.load(lp) if lp.suffix == ".npy" else np.asarray(json.loads(lp.read_text()))
    return matrix.astype(np.float64), labels.astype(np.int64)


def cmd_fit(ctx):
    from .heads import LabeledEmbeddingSet, classify, detect, fit_classifier, fit_detector
    cfg = ctx.cfg
    X, y = _load_labeled(cfg.data["embeddings"], cfg.data.get("labels"))
    data = LabeledEmbeddingSet(X, y)
    kw = dict(lam=ctx.lam, config=ctx.solver(), regularize_bias=cfg.solver["regularize_bias"],
              average_loss=cfg.solver["average_loss"])
    if cfg.task == "classification":
        head, res = fit_classifier(data, return_result=True, **kw)
        predict = lambda e: classify(head, e)
    else:
        head, res = fit_detector(data, return_result=True, **kw)
        predict = lambda e: detect(head, e)
    (ctx.out / "head.json").write_text(head.to_json())
    pred = np.atleast_1d(predict(X))
    result = {"task": cfg.task, "loss": res.loss, "grad_norm": res.grad_norm, "iterations": res.iterations,
              "converged": res.converged, "train_predictions": pred.tolist(),
              "train_accuracy": float(np.mean(pred == y))}
    if cfg.data.get("test"):
        Xt, yt = _load_labeled(cfg.data["test"])
        pt = np.atleast_1d(predict(Xt))
        result.update(test_predictions=pt.tolist(), test_accuracy=float(np.mean(pt == yt)))
    _json(ctx.out / "fit.json", result)


def cmd_eval(ctx):
    from .harness import run_classification_trials, run_detection_trials, write_reports
    cfg = ctx.cfg
    ep = ctx.embedded_pairs()
    kw = dict(trials=cfg.trials, lam=ctx.lam, seed=cfg.seed, config=ctx.solver())
    if cfg.task in ("detection", "both"):
        write_reports(ctx.out / "detection", run_detection_trials(ep, cfg.sizes, **kw))
        for t in ep.threat_ids:
            write_reports(ctx.out / f"detection_{ep.threat_names[t]}",
                          run_detection_trials(ep, cfg.sizes, threats=[t], **kw))
    if cfg.task in ("classification", "both"):
        write_reports(ctx.out / "classification", run_classification_trials(ep, cfg.sizes, **kw))


def cmd_generalize(ctx):
    from .harness import leave_one_out_generalization
    cfg = ctx.cfg
    result = leave_one_out_generalization(ctx.embedded_pairs(), cfg.generalize["n_single"], cfg.generalize["n_union"],
                                          trials=cfg.trials, lam=ctx.lam, seed=cfg.seed, config=ctx.solver())
    _json(ctx.out / "generalization.json", result.to_dict())


def cmd_adv_train(ctx):
    from .harness import pair_preserving_split
    from .robustness import AdaptiveSpec, ATConfig, adversarially_train
    cfg = ctx.cfg
    pairs, _ = ctx.pairs()
    train, test = pair_preserving_split(pairs, cfg.at["samples_per_attack"], seed=cfg.seed)
    at = ATConfig(epochs=cfg.at["epochs"], beta=cfg.at["beta"], samples_per_attack=cfg.at["samples_per_attack"],
                  seed=cfg.at["seed"], adaptive=AdaptiveSpec(**cfg.adaptive), lam=ctx.lam, solver=ctx.solver(),
                  detector_weight=cfg.at["detector_weight"])
    result = adversarially_train(train, ctx.encoder(), ctx.classifier(), at, eval_pairs=test, return_result=True)
    (ctx.out / "head.json").write_text(result.head.to_json())
    (ctx.out / "initial_head.json").write_text(result.initial.to_json())
    result.write_log(ctx.out / "at_log.json")
    _json(ctx.out / "adv_train.json", {"config": at.to_dict(), "train_pairs": len(train), "test_pairs": len(test),
                                       "initial": result.log[0], "final": result.log[-1]})


def cmd_poison_defend(ctx):
    from .datasets import load_image_tensor
    from .encoders import embed
    from .heads import LabeledEmbeddingSet
    from .errors import DegenerateDefenseError
    from .poison import defense_trials, evaluate_poisonings, general_defense_trials, load_poison_sets
    cfg, p = ctx.cfg, ctx.cfg.poison
    encoder = ctx.encoder()
    if p.get("finetune"):
        Xf, yf = load_image_tensor(p["finetune"])
        test = load_image_tensor(p["test"]) if p.get("test") else None
        train_sets = {k: load_poison_sets(d) for k, d in (p.get("train") or {}).items()}
        eval_sets = [s for d in p.get("eval") or [] for s in load_poison_sets(d)]
        if not train_sets or not eval_sets:
            raise ConfigError("poison.train", "poison.train (kind -> archive) and poison.eval archives are required")
    else:
        bench = ctx.bench()
        (Xf, yf), test = bench.poison["finetune"], bench.poison["test"]
        half = lambda sets: (sets[: len(sets) // 2], sets[len(sets) // 2:])
        train_sets = {k: half(v)[0] for k, v in bench.poison["sets"].items()}
        eval_sets = [s for v in bench.poison["sets"].values() for s in half(v)[1]]
    finetune = LabeledEmbeddingSet(embed(encoder, Xf), yf)
    test_set = LabeledEmbeddingSet(embed(encoder, test[0]), test[1]) if test is not None else None
    k = int(max(yf.max(), max(s.base_class for s in eval_sets))) + 1
    kw = dict(lam=p["lambda"], config=ctx.solver(), num_classes=k)
    undefended = evaluate_poisonings(finetune, eval_sets, encoder, test_set, **kw)
    result = {"undefended": undefended.to_dict(), "eval_sets": len(eval_sets),
              "train_sets": {k: len(v) for k, v in train_sets.items()}}
    trial_kw = dict(trials=p["trials"], n_targets=p["n_targets"], seed=cfg.seed, **kw)
    # a degenerate defense is a result, not a failed run
    try:
        result["ensemble"] = defense_trials(train_sets, eval_sets, finetune, encoder, test_set, **trial_kw)[0].to_dict()
    except DegenerateDefenseError as exc:
        result["ensemble"] = {"degenerate": str(exc)}
    try:
        general, rows = general_defense_trials(train_sets, eval_sets, finetune, encoder, test_set, **trial_kw)
        result["general"] = dict(general.to_dict(), clean_rows=rows)
    except DegenerateDefenseError as exc:
        result["general"] = {"degenerate": str(exc)}
    _json(ctx.out / "defense.json", result)


def cmd_percept(ctx):
    from .harness import correlation_report, distance_distributions, load_perceptibility_csv
    cfg = ctx.cfg
    if cfg.data.get("perceptibility"):
        report = correlation_report(load_perceptibility_csv(cfg.data["perceptibility"]))
        _json(ctx.out / "correlation.json", report.to_dict())
    if cfg.data.get("pairs") or cfg.benchmark is not None:
        pairs, specs = ctx.pairs()
        _json(ctx.out / "distances.json", distance_distributions(pairs, ctx.encoder(), [s.name for s in specs]))


HANDLERS = {"train-encoder": cmd_train_encoder, "gen-attacks": cmd_gen_attacks, "fit": cmd_fit, "eval": cmd_eval,
            "generalize": cmd_generalize, "adv-train": cmd_adv_train, "poison-defend": cmd_poison_defend,
            "percept": cmd_percept}


def build_parser():
    parser = argparse.ArgumentParser(prog="simcat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"simcat {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", "-c", help="JSON run configuration (defaults apply to omitted fields)")
        p.add_argument("--out", "-o", help="output directory (overrides the config's 'out')")
        p.add_argument("--jobs", "-j", type=int, default=None, help="torch intra-op threads")
        p.add_argument("--seed", type=int, default=None, help="master seed (SIMCAT_SEED takes precedence)")
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        print("simcat: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            cfg = load_config(args.config, args.subcommand)
        else:
            cfg = validate_config({}, args.subcommand)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("jobs", "must be >= 1")
            cfg.jobs = args.jobs
        apply_env(cfg)
        out = args.out or cfg.out
        if not out:
            raise ConfigError("out", "an output directory is required (--out or config 'out')")
        cfg.out = str(out)
        torch.set_num_threads(cfg.jobs)
        ctx = Context(cfg, out)
        ctx.out.mkdir(parents=True, exist_ok=True)
        _json(ctx.out / "config.json", cfg.to_dict())
        HANDLERS[cfg.subcommand](ctx)
        run_manifest(ctx.out, cfg, {"seed": cfg.seed})
    except ConfigError as exc:
        print(f"simcat: config error: {exc}", file=sys.stderr)
        return 1
    except (SimCatError, OSError, ValueError) as exc:
        print(f"simcat: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
