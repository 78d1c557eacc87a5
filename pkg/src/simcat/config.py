"""Run configuration: validation with field-level errors, defaults, and run manifests."""
import copy
import hashlib
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

SUBCOMMANDS = ("train-encoder", "gen-attacks", "fit", "eval", "generalize", "adv-train", "poison-defend", "percept")

# Defaults: solver (lambda 1, tolerance 1e-3, 1500 iterations) and adversarial
# training (20 epochs, beta 100, 25 samples per attack, adaptive PGD-L2 with
# epsilon 2.0, 20 steps of 0.05).
DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "task": "detection",
    "sizes": [2, 5, 10, 25, 50],
    "trials": 10,
    "solver": {"lambda": 1.0, "tolerance": 1e-3, "max_iterations": 1500, "history": 10,
               "regularize_bias": True, "average_loss": False},
    "adaptive": {"norm": "L2", "epsilon": 2.0, "steps": 20, "step_size": 0.05},
    "at": {"epochs": 20, "beta": 100.0, "samples_per_attack": 25, "seed": 0, "detector_weight": 1.0},
    "generalize": {"n_single": 100, "n_union": 5},
    "encoder": {"source": "load", "kind": "contrastive", "path": None, "epochs": 20, "temperature": 0.5,
                "batch_size": 128, "projection_dim": 64, "embed_dim": 128, "lr": 1e-3},
    "poison": {"trials": 5, "n_targets": 10, "lambda": 1.0},
    "data": {},
    "threats": None,
    "classifier": None,
    "benchmark": None,
}

PATH_FIELDS = ("data.images", "data.pairs", "data.embeddings", "data.labels", "data.perceptibility", "data.test",
               "encoder.path", "classifier", "poison.finetune", "poison.test", "threats_file")

# which inputs each subcommand needs (alternatives separated by "|"); a
# benchmark section supplies encoders, pairs and poison data
REQUIRED = {
    "train-encoder": ["data.images"],
    "gen-attacks": ["data.images", "classifier|benchmark"],
    "fit": ["data.embeddings"],
    "eval": ["data.pairs|benchmark", "encoder.path|benchmark"],
    "generalize": ["data.pairs|benchmark", "encoder.path|benchmark"],
    "adv-train": ["data.pairs|benchmark", "encoder.path|benchmark", "classifier|benchmark"],
    "poison-defend": ["poison.finetune|benchmark", "encoder.path|benchmark"],
    "percept": ["data.perceptibility|data.pairs|benchmark"],
}


@dataclass
class RunConfig:
    """Fully defaulted configuration for one subcommand run."""

    subcommand: str
    seed: int
    jobs: int
    task: str
    sizes: list
    trials: int
    solver: dict
    adaptive: dict
    at: dict
    generalize: dict
    encoder: dict
    poison: dict
    data: dict
    threats: list
    classifier: str
    benchmark: dict
    out: str = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        if not d["extra"]:
            d.pop("extra")
        return d

    def digest(self):
        doc = self.to_dict()
        doc.pop("out", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _get(doc, dotted):
    cur = doc
    for part in dotted.split("."):
        if not isinstance(cur, dict) or cur.get(part) is None:
            return None
        cur = cur[part]
    return cur


def _merge(defaults, doc, prefix):
    if doc is None:
        return copy.deepcopy(defaults)
    if not isinstance(doc, dict):
        raise ConfigError(prefix, f"expected an object, got {type(doc).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in doc.items():
        out[key] = value
    return out


def _number(doc, key, prefix, kind=float, low=None, high=None, low_open=False, allow=()):
    value = doc[key]
    name = f"{prefix}.{key}" if prefix else key
    if value in allow:
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(name, f"expected a number, got {value!r}")
    if kind is int and (not float(value).is_integer()):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if not math.isfinite(value) and not (low is not None and value == math.inf and high is None):
        raise ConfigError(name, f"must be finite, got {value!r}")
    if low is not None and (value < low or (low_open and value == low)):
        raise ConfigError(name, f"must be {'>' if low_open else '>='} {low}, got {value!r}")
    if high is not None and value > high:
        raise ConfigError(name, f"must be <= {high}, got {value!r}")
    doc[key] = kind(value)
    return doc[key]


def _bool(doc, key, prefix):
    if not isinstance(doc[key], bool):
        raise ConfigError(f"{prefix}.{key}", f"expected true or false, got {doc[key]!r}")


def _check_threat(t, i):
    from .attacks import NORMS
    name = f"threats[{i}]"
    if not isinstance(t, dict):
        raise ConfigError(name, "expected an object")
    for req in ("name", "norm", "epsilon"):
        if req not in t:
            raise ConfigError(f"{name}.{req}", "missing required field")
    if t["norm"] not in NORMS:
        raise ConfigError(f"{name}.norm", f"must be one of {list(NORMS)}")
    t = dict({"step_size": 0.0, "iterations": 0, "c": None, "random_start": False}, **t)
    if t["epsilon"] is not None:  # null is an unbounded budget, as in threat spec files
        _number(t, "epsilon", name, low=0)
    _number(t, "step_size", name, low=0)
    _number(t, "iterations", name, kind=int, low=0)
    if t["c"] is not None:
        _number(t, "c", name, low=0)
    if t["iterations"] > 0 and t["step_size"] <= 0:
        raise ConfigError(f"{name}.step_size", "must be > 0 when iterations > 0")
    return t


def validate_config(document, subcommand=None, check_paths=True):
    """Validate a parsed JSON document and return a fully defaulted :class:`RunConfig`.

    Raises :class:`ConfigError` naming the offending field (dotted path).
    ``subcommand`` overrides the document's own ``subcommand`` entry.
    """
    if not isinstance(document, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    doc = copy.deepcopy(document)
    sub = subcommand or doc.get("subcommand")
    if sub not in SUBCOMMANDS:
        raise ConfigError("subcommand", f"must be one of {list(SUBCOMMANDS)}, got {sub!r}")
    known = set(DEFAULTS) | {"subcommand", "out", "extra"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    cfg = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            cfg[key] = _merge(default, doc.get(key), key)
        else:
            cfg[key] = copy.deepcopy(doc.get(key, default))

    _number(cfg, "seed", "", kind=int, low=0)
    _number(cfg, "jobs", "", kind=int, low=1)
    _number(cfg, "trials", "", kind=int, low=1)
    if cfg["task"] not in ("detection", "classification", "both"):
        raise ConfigError("task", "must be detection, classification or both")
    if not isinstance(cfg["sizes"], list) or not cfg["sizes"]:
        raise ConfigError("sizes", "expected a non-empty list of integers")
    for i in range(len(cfg["sizes"])):
        _number(cfg["sizes"], i, "sizes", kind=int, low=1)

    s = cfg["solver"]
    _number(s, "lambda", "solver", low=0)
    _number(s, "tolerance", "solver", low=0, low_open=True)
    _number(s, "max_iterations", "solver", kind=int, low=1)
    _number(s, "history", "solver", kind=int, low=1)
    _bool(s, "regularize_bias", "solver")
    _bool(s, "average_loss", "solver")

    a = cfg["adaptive"]
    if a["norm"] != "L2":
        raise ConfigError("adaptive.norm", "only L2 is supported")
    _number(a, "epsilon", "adaptive", low=0)
    _number(a, "steps", "adaptive", kind=int, low=0)
    _number(a, "step_size", "adaptive", low=0, low_open=True)

    at = cfg["at"]
    _number(at, "epochs", "at", kind=int, low=1)
    _number(at, "beta", "at", low=0, allow=("replace",))
    _number(at, "samples_per_attack", "at", kind=int, low=1)
    _number(at, "seed", "at", kind=int, low=0)
    _number(at, "detector_weight", "at", low=0)

    g = cfg["generalize"]
    _number(g, "n_single", "generalize", kind=int, low=1)
    _number(g, "n_union", "generalize", kind=int, low=1)

    e = cfg["encoder"]
    if e["source"] not in ("train", "load", "load-cache"):
        raise ConfigError("encoder.source", "must be train, load or load-cache")
    if e["kind"] not in ("contrastive", "supervised", "baseline"):
        raise ConfigError("encoder.kind", "must be contrastive, supervised or baseline")
    for key in ("epochs", "batch_size", "projection_dim", "embed_dim"):
        _number(e, key, "encoder", kind=int, low=0 if key == "epochs" else 1)
    _number(e, "temperature", "encoder", low=0, low_open=True)
    _number(e, "lr", "encoder", low=0, low_open=True)

    p = cfg["poison"]
    _number(p, "trials", "poison", kind=int, low=1)
    _number(p, "n_targets", "poison", kind=int, low=1)
    _number(p, "lambda", "poison", low=0)

    if cfg["threats"] is not None:
        if not isinstance(cfg["threats"], list) or not cfg["threats"]:
            raise ConfigError("threats", "expected a non-empty list of threat objects")
        cfg["threats"] = [_check_threat(t, i) for i, t in enumerate(cfg["threats"])]
    if cfg["benchmark"] is not None and not isinstance(cfg["benchmark"], dict):
        raise ConfigError("benchmark", "expected an object (e.g. {\"cache\": \"dir\"})")

    merged = dict(cfg, subcommand=sub)
    required = REQUIRED[sub]
    if e["source"] == "load-cache" and sub in ("eval", "generalize"):
        # precomputed embeddings replace both the encoder and the images
        required = ["data.embeddings", "data.labels"]
    for requirement in required:
        options = requirement.split("|")
        if all(_get(merged, o) is None for o in options):
            raise ConfigError(options[0], f"required for {sub}" + (f" (or {', '.join(options[1:])})"
                                                                       if len(options) > 1 else ""))
    if check_paths:
        for dotted in PATH_FIELDS:
            value = _get(merged, dotted)
            if isinstance(value, str) and not Path(value).exists():
                raise ConfigError(dotted, f"path does not exist: {value}")
        for kind, path in (_get(merged, "poison.train") or {}).items():
            if not Path(path).exists():
                raise ConfigError(f"poison.train.{kind}", f"path does not exist: {path}")
        for i, path in enumerate(_get(merged, "poison.eval") or []):
            if not Path(path).exists():
                raise ConfigError(f"poison.eval[{i}]", f"path does not exist: {path}")
    return RunConfig(subcommand=sub, out=doc.get("out"), extra=doc.get("extra") or {}, **cfg)


def load_config(path, subcommand=None, check_paths=True):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError("<document>", f"cannot read {path}: {exc}") from exc
    return validate_config(doc, subcommand, check_paths)


def apply_env(config):
    """Environment override: ``SIMCAT_SEED`` replaces the configured seed."""
    value = os.environ.get("SIMCAT_SEED")
    if value is not None:
        try:
            config.seed = int(value)
        except ValueError as exc:
            raise ConfigError("SIMCAT_SEED", f"expected an integer, got {value!r}") from exc
        if config.seed < 0:
            raise ConfigError("SIMCAT_SEED", "must be >= 0")
    return config


MANIFEST = "manifest.json"


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import numpy
    import scipy
    import torch

    from . import __version__
    return {"simcat": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def run_manifest(out_dir, config=None, seeds=None):
    """Write ``manifest.json`` listing the config hash, seeds, versions and a checksum per output file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {
        "config_hash": config.digest() if config is not None else None,
        "seeds": seeds if seeds is not None else ({"seed": config.seed} if config is not None else {}),
        "versions": _versions(),
        "outputs": [{"path": p.relative_to(out).as_posix(), "sha256": file_sha256(p), "bytes": p.stat().st_size}
                    for p in files],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1))
    return path
