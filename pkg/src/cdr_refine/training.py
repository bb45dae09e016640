"""Joint training over H1/H2/H3 with Adam, early stopping and JSON checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import bundle_loops
from .losses import LossReport, default_seq_weight, total_loss
from .model import MODES, ModelConfig, init_params, run_refinement

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
Z_RANGE = (1, 6)
Q_RANGE = (2, 10)


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, truncated or of the wrong version."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    z: int = 2
    q: int = 2
    mpn_layers: int = 4
    hidden: int = 256
    desk_scale: bool = False
    mode: str = "teacher_forced"
    patience: int = 10
    checkpoint_dir: str | None = None
    k_neighbors: int = 8
    attention: str = "loop"
    clip_norm: float = 5.0
    w_seq: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not Z_RANGE[0] <= self.z <= Z_RANGE[1]:
            raise ValueError(f"z must lie in [{Z_RANGE[0]}, {Z_RANGE[1]}], got {self.z}")
        if not Q_RANGE[0] <= self.q <= Q_RANGE[1]:
            raise ValueError(f"q must lie in [{Q_RANGE[0]}, {Q_RANGE[1]}], got {self.q}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    @property
    def seq_weight(self):
        return default_seq_weight(self.mode) if self.w_seq is None else float(self.w_seq)

    def model_config(self):
        return ModelConfig(
            z=self.z,
            q=self.q,
            layers=2 if self.desk_scale else self.mpn_layers,
            hidden=64 if self.desk_scale else self.hidden,
            k_neighbors=self.k_neighbors,
            attention=self.attention,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values):
        """Build from string or typed values, coercing by field type; unknown keys are rejected."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(fields[key].type, raw)
        return cls(**kwargs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if "None" in str(type_name) and text.lower() in ("", "none", "null"):
        return None
    if type_name.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name.startswith("int"):
        return int(text)
    if type_name.startswith("float"):
        return float(text)
    return text


def read_key_values(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# -- optimiser ------------------------------------------------------------------------


def new_moments(params):
    return {
        "step": 0,
        "m": {k: np.zeros_like(v.data) for k, v in params.items()},
        "v": {k: np.zeros_like(v.data) for k, v in params.items()},
    }


def adam_step(params, grads, moments, config, t):
    """Bias-corrected Adam update, in place. ``t`` is the 1-based step count."""
    if t < 1:
        raise ValueError(f"Adam step count starts at 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = moments["m"][name]
        v = moments["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    moments["step"] = t
    return params, moments


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# -- loops ----------------------------------------------------------------------------


def _mean_report(reports):
    keys = ("l_seq", "l_d", "l_beta", "l_ca", "l_struct", "total")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return LossReport(**means)


def record_loss(bundle, params, model_config, mode, w_seq):
    result = run_refinement(bundle, params, model_config, mode)
    return total_loss(result.trace, bundle, w_seq)


def train_epoch(dataset, params, config, moments, epoch=0):
    """One seeded-order pass with one optimiser step per antibody."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    bundles = [d if not hasattr(d, "heavy_seq") else bundle_loops(d) for d in dataset]
    mcfg = config.model_config()
    order = np.random.default_rng([config.seed, epoch]).permutation(len(bundles))
    reports = []
    for idx in order:
        bundle = bundles[idx]
        for p in params.values():
            p.grad = None
        report = record_loss(bundle, params, mcfg, config.mode, config.seq_weight)
        if not math.isfinite(report.total):
            raise NumericalError(f"non-finite loss on record {bundle.pdb_id!r}")
        T.backward(report.tensor)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        norm = clip_gradients(grads, config.clip_norm)
        if not math.isfinite(norm):
            raise NumericalError(f"non-finite gradient on record {bundle.pdb_id!r}")
        step = moments["step"] + 1
        adam_step(params, grads, moments, config, step)
        report.tensor = None
        reports.append(report)
    return params, _mean_report(reports)


def evaluate_loss(dataset, params, config):
    """Mean loss report without recording a tape."""
    bundles = [d if not hasattr(d, "heavy_seq") else bundle_loops(d) for d in dataset]
    mcfg = config.model_config()
    with frozen(params):
        reports = [record_loss(b, params, mcfg, config.mode, config.seq_weight) for b in bundles]
    return _mean_report(reports)


class frozen:
    """Context manager that stops parameters from being taped."""

    def __init__(self, params):
        self.params = params

    def __enter__(self):
        self.flags = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        return self.params

    def __exit__(self, *exc):
        for k, p in self.params.items():
            p.requires_grad = self.flags[k]
        return False


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> ndarray
    opt: dict = field(default_factory=dict)
    epoch: int = 0
    val_metric: float | None = None
    version: int = CHECKPOINT_VERSION

    def params(self):
        return {k: T.parameter(v.copy()) for k, v in self.tensors.items()}

    def train_config(self):
        return TrainConfig.from_mapping(self.config)


def snapshot(params, moments, config, epoch, val_metric):
    # the output location is not part of the model, and keeping it would make
    # otherwise identical runs in different directories differ byte for byte
    return Checkpoint(
        config={**config.to_dict(), "checkpoint_dir": None},
        tensors={k: p.data.copy() for k, p in params.items()},
        opt=copy.deepcopy(moments) if moments else {},
        epoch=epoch,
        val_metric=val_metric,
    )


def _encode_array(a):
    return {"shape": list(a.shape), "data": [float(x) for x in np.asarray(a).reshape(-1)]}


def _decode_array(obj):
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(ckpt, path):
    """Write versioned JSON. Floats use ``repr``, which round-trips float64 exactly."""
    opt = {}
    if ckpt.opt:
        opt = {
            "step": int(ckpt.opt["step"]),
            "m": {k: _encode_array(v) for k, v in ckpt.opt["m"].items()},
            "v": {k: _encode_array(v) for k, v in ckpt.opt["v"].items()},
        }
    doc = {
        "version": ckpt.version,
        "config": ckpt.config,
        "tensors": {k: _encode_array(v) for k, v in ckpt.tensors.items()},
        "opt": opt,
        "epoch": ckpt.epoch,
        "val_metric": ckpt.val_metric,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, allow_nan=False), encoding="utf-8")
    return path


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        found = doc.get("version") if isinstance(doc, dict) else None
        raise CheckpointError(f"checkpoint version {found!r} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        tensors = {k: _decode_array(v) for k, v in doc["tensors"].items()}
        opt = doc.get("opt") or {}
        if opt:
            opt = {
                "step": int(opt["step"]),
                "m": {k: _decode_array(v) for k, v in opt["m"].items()},
                "v": {k: _decode_array(v) for k, v in opt["v"].items()},
            }
        return Checkpoint(
            config=doc["config"],
            tensors=tensors,
            opt=opt,
            epoch=int(doc["epoch"]),
            val_metric=doc.get("val_metric"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None


# -- driver -------------------------------------------------------------------------


def fit(train, val, config, params=None, on_epoch=None):
    """Train until ``config.epochs`` or ``config.patience`` epochs without validation gain.

    Returns ``(best_checkpoint, history)``; history has one dict per epoch.
    Without validation data the training loss drives model selection.
    """
    params = params if params is not None else init_params(config.model_config(), config.seed)
    moments = new_moments(params)
    best, best_metric, stale, history = None, math.inf, 0, []
    for epoch in range(1, config.epochs + 1):
        _, train_report = train_epoch(train, params, config, moments, epoch)
        val_report = evaluate_loss(val, params, config) if val else train_report
        row = {"epoch": epoch, **{f"train_{k}": v for k, v in train_report.as_dict().items()}}
        row.update({f"val_{k}": v for k, v in val_report.as_dict().items()})
        history.append(row)
        logger.info("epoch %d train %.4f val %.4f", epoch, train_report.total, val_report.total)
        if on_epoch:
            on_epoch(row)
        if val_report.total < best_metric:
            best_metric, stale = val_report.total, 0
            best = snapshot(params, moments, config, epoch, val_report.total)
            if config.checkpoint_dir:
                save_checkpoint(best, Path(config.checkpoint_dir) / "best.json")
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop after %d stale epochs", stale)
                break
    if best is None:
        best = snapshot(params, moments, config, 0, None)
    return best, history
