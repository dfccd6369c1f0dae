"""Seeded, reproducible training of any model in the zoo.

The objective is mean binary cross-entropy plus an l2 penalty on the
trainable parameters. Optimization is the adaptive-moment update
(decay 0.9/0.999, epsilon 1e-8). All randomness (init, shuffling) flows
from TrainConfig.seed, so identical (seed, data, config) reproduce
bitwise-identical parameter trajectories.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import UndefinedMetricError
from .metrics import auprc, auroc
from .models import Model, new_model, save_model

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    pos_weight: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name in ("learning_rate", "batch_size", "max_epochs", "patience",
                     "pos_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class OptimizerState:
    """First/second moment accumulators mirroring the trainable parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ad.ParamSet) -> "OptimizerState":
        m = {n: np.zeros_like(t.data) for n, t in params.trainable_items()}
        v = {n: np.zeros_like(t.data) for n, t in params.trainable_items()}
        return cls(m=m, v=v)


def collect_grads(params: ad.ParamSet) -> dict[str, np.ndarray]:
    return {n: t.grad for n, t in params.trainable_items() if t.grad is not None}


def opt_step(params: ad.ParamSet, grads: dict[str, np.ndarray],
             state: OptimizerState, cfg: TrainConfig):
    """One adaptive-moment update in place; frozen parameters are untouched."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    lr = cfg.learning_rate
    for name, t in params.trainable_items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auroc: float
    val_auprc: float


@dataclass
class FitResult:
    model: Model                 # parameters at the best validation epoch
    final_model: Model           # parameters after the last epoch
    history: list[EpochStats]
    best_epoch: int
    run_dir: Path | None = None


def _stack_batch(windows, idx, dtype) -> tuple[np.ndarray, np.ndarray]:
    xb = np.stack([windows[i].x for i in idx]).astype(dtype, copy=False)
    yb = np.asarray([windows[i].y for i in idx], dtype=dtype)
    return xb, yb


def _safe_metric(fn, scores, labels) -> float:
    try:
        return fn(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def fit(arch: str, train_windows, val_windows, cfg: TrainConfig,
        model_config=None, channels=None, montage_name=None,
        run_dir=None) -> FitResult:
    """Train one classifier; early-stops on validation AUPRC when a
    validation set is given, otherwise runs all epochs."""
    if not train_windows:
        raise ValueError("training set is empty")
    labels = np.asarray([w.y for w in train_windows])
    if labels.min() == labels.max():
        log.warning("training set is single-class (all %d); proceeding", labels[0])

    dtype = cfg.np_dtype
    rng = np.random.default_rng(cfg.seed)
    n_channels = train_windows[0].x.shape[0]
    model = new_model(arch, model_config, n_channels=n_channels, rng=rng,
                      dtype=dtype, channels=channels, montage_name=montage_name)
    state = OptimizerState.for_params(model.params)

    n = len(train_windows)
    history: list[EpochStats] = []
    best_epoch = 0
    best_auprc = -np.inf
    best_params = None
    epochs_since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb, yb = _stack_batch(train_windows, idx, dtype)
            model.params.zero_grad()
            p = model.forward(xb)
            loss = ad.bce_l2_loss(p, yb, model.params, cfg.lam, cfg.pos_weight)
            loss.backward()
            opt_step(model.params, collect_grads(model.params), state, cfg)
            total += loss.item() * len(idx)
        train_loss = total / n

        val_roc = val_prc = float("nan")
        if val_windows:
            scores = model.predict(val_windows, batch_size=cfg.batch_size)
            vy = [w.y for w in val_windows]
            val_roc = _safe_metric(auroc, scores, vy)
            val_prc = _safe_metric(auprc, scores, vy)
        history.append(EpochStats(epoch, train_loss, val_roc, val_prc))

        if val_windows and not np.isnan(val_prc):
            if val_prc > best_auprc:
                best_auprc = val_prc
                best_epoch = epoch
                best_params = model.params.copy()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.patience:
                    break

    final_model = Model(model.arch, model.params, model.config,
                        channels=model.channels, montage_name=model.montage_name)
    if best_params is None:
        best_params = model.params.copy()
        best_epoch = history[-1].epoch if history else 0
    best_model = Model(model.arch, best_params, model.config,
                       channels=model.channels, montage_name=model.montage_name)

    out_dir = None
    if run_dir is not None:
        out_dir = Path(run_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_artifacts(out_dir, arch, cfg, best_model, final_model, history)
    return FitResult(best_model, final_model, history, best_epoch, out_dir)


def write_run_artifacts(out_dir: Path, arch: str, cfg: TrainConfig,
                        best_model: Model, final_model: Model,
                        history: list[EpochStats]) -> None:
    resolved = {
        "architecture": arch,
        "model_config": asdict(best_model.config),
        "train_config": asdict(cfg),
        "montage_name": best_model.montage_name,
        "channels": list(best_model.channels) if best_model.channels else None,
    }
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    with open(out_dir / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auroc", "val_auprc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss),
                             repr(row.val_auroc), repr(row.val_auprc)])
    save_model(out_dir / "best.ckpt", best_model, {"train_config": asdict(cfg)})
    save_model(out_dir / "final.ckpt", final_model, {"train_config": asdict(cfg)})
