"""Mixture of experts over frozen base models.

A small GRU reads the channel-mean series of a window (so the gate works
for any montage), a single affine layer maps its final hidden state to one
logit per member, and a softmax yields sample-level weights on the
simplex. The ensemble probability is the weighted sum of the members'
probabilities. Gate training updates only the gate; member parameters are
frozen and their checkpoints stay byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .checkpoint import load_params, save_params
from .models import (Model, _stack_inputs, init_gru_gates, load_model,
                     params_dtype, save_model)
from .training import (EpochStats, OptimizerState, TrainConfig, collect_grads,
                       opt_step, _safe_metric)
from .metrics import auprc, auroc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GateConfig:
    gru_hidden: int = 16
    input_scale: float = 1.0

    def __post_init__(self):
        if self.gru_hidden < 1:
            raise ValueError("gru_hidden must be >= 1")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")


@dataclass
class Member:
    tag: str
    model: Model


@dataclass
class EnsembleBundle:
    """K frozen scorers plus the trainable gate that weights them."""

    members: list[Member]
    gate: ParamSet
    gate_config: GateConfig

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        for m in self.members:
            m.model.params.freeze()

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def member_tags(self) -> list[str]:
        return [m.tag for m in self.members]


def init_gate_params(cfg: GateConfig, k: int, rng: np.random.Generator,
                     dtype=np.float64) -> ParamSet:
    if k < 1:
        raise ValueError("need at least one ensemble member")
    params = ParamSet()
    init_gru_gates(params, "gate", 1, cfg.gru_hidden, rng, dtype)
    params.add("head.W", ad.glorot_uniform(rng, (k, cfg.gru_hidden),
                                           cfg.gru_hidden, k, dtype))
    params.add("head.b", np.zeros(k, dtype=dtype))
    return params


def make_bundle(members: list[Member], cfg: GateConfig | None = None,
                rng: np.random.Generator | None = None,
                dtype=np.float64) -> EnsembleBundle:
    cfg = cfg or GateConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    gate = init_gate_params(cfg, len(members), rng, dtype)
    return EnsembleBundle(members, gate, cfg)


def _gate_steps(batch: np.ndarray, dtype, scale: float = 1.0) -> np.ndarray:
    """Channel-mean series as a (L, N, 1) step sequence."""
    mean_series = batch.mean(axis=1, dtype=np.float64).astype(dtype)  # (N, L)
    if scale != 1.0:
        mean_series = mean_series * np.asarray(scale, dtype=dtype)
    return np.ascontiguousarray(mean_series.T)[:, :, None]


def gate_weights_tensor(batch: np.ndarray, bundle: EnsembleBundle) -> Tensor:
    dtype = params_dtype(bundle.gate)
    steps = _gate_steps(batch, dtype, bundle.gate_config.input_scale)
    gates = [bundle.gate[f"gate.{g}"] for g in
             ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")]
    h = ad.gru(steps, *gates)
    logits = ad.dense(h, bundle.gate["head.W"], bundle.gate["head.b"])
    return ad.softmax(logits)


def gate_weights(x, bundle: EnsembleBundle, batch_size: int = 64) -> np.ndarray:
    """Sample-level simplex weights: (K,) for one window, (N, K) for a batch."""
    arr = _stack_inputs(x)
    single = isinstance(x, np.ndarray) and x.ndim == 2
    out = np.empty((arr.shape[0], bundle.k), dtype=np.float64)
    with ad.no_grad():
        for lo in range(0, arr.shape[0], batch_size):
            chunk = arr[lo:lo + batch_size]
            out[lo:lo + chunk.shape[0]] = gate_weights_tensor(chunk, bundle).data
    return out[0] if single else out


def member_predictions(x, bundle: EnsembleBundle, batch_size: int = 64) -> np.ndarray:
    """(N, K) member probabilities; member failures name the member."""
    arr = _stack_inputs(x)
    preds = np.empty((arr.shape[0], bundle.k), dtype=np.float64)
    for j, member in enumerate(bundle.members):
        try:
            preds[:, j] = member.model.predict(arr, batch_size=batch_size)
        except Exception as exc:
            raise type(exc)(f"ensemble member {j} ({member.tag}): {exc}") from exc
    return preds


def ensemble_predict(x, bundle: EnsembleBundle, batch_size: int = 64) -> np.ndarray:
    """Convex combination of member probabilities under the gate weights."""
    arr = _stack_inputs(x)
    single = isinstance(x, np.ndarray) and x.ndim == 2
    w = gate_weights(arr, bundle, batch_size)
    preds = member_predictions(arr, bundle, batch_size)
    out = (w * preds).sum(axis=1)
    return float(out[0]) if single else out


def train_gate(bundle: EnsembleBundle, train_windows, cfg: TrainConfig,
               val_windows=None) -> list[EpochStats]:
    """Fit the gate on the ensemble objective; members stay frozen.

    Member probabilities are precomputed once (they cannot change), so each
    epoch only runs the gate GRU forward/backward.
    """
    if not train_windows:
        raise ValueError("gate training set is empty")
    dtype = cfg.np_dtype
    rng = np.random.default_rng(cfg.seed)
    x_all = np.stack([w.x for w in train_windows])
    y_all = np.asarray([w.y for w in train_windows], dtype=dtype)
    member_probs = member_predictions(x_all, bundle,
                                      batch_size=cfg.batch_size).astype(dtype)
    val_probs = None
    if val_windows:
        val_x = np.stack([w.x for w in val_windows])
        val_y = [w.y for w in val_windows]
        val_probs = member_predictions(val_x, bundle, batch_size=cfg.batch_size)

    state = OptimizerState.for_params(bundle.gate)
    n = len(train_windows)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb = x_all[idx].astype(dtype, copy=False)
            bundle.gate.zero_grad()
            w = gate_weights_tensor(xb, bundle)
            p_hat = ad.tensor_sum(ad.mul(w, member_probs[idx]), axis=1)
            loss = ad.bce_l2_loss(p_hat, y_all[idx], bundle.gate, cfg.lam,
                                  cfg.pos_weight)
            loss.backward()
            opt_step(bundle.gate, collect_grads(bundle.gate), state, cfg)
            total += loss.item() * len(idx)
        val_roc = val_prc = float("nan")
        if val_windows:
            wv = gate_weights(val_x, bundle, batch_size=cfg.batch_size)
            scores = (wv * val_probs).sum(axis=1)
            val_roc = _safe_metric(auroc, scores, val_y)
            val_prc = _safe_metric(auprc, scores, val_y)
        history.append(EpochStats(epoch, total / n, val_roc, val_prc))
    return history


def mean_weights_by_neonate(bundle: EnsembleBundle, windows,
                            batch_size: int = 64) -> dict[str, np.ndarray]:
    """Average gate weight per neonate plus the pooled 'all' row."""
    w = gate_weights(np.stack([win.x for win in windows]), bundle, batch_size)
    ids = [win.neonate_id for win in windows]
    table: dict[str, np.ndarray] = {}
    for nid in sorted(set(ids)):
        mask = np.asarray([i == nid for i in ids])
        table[nid] = w[mask].mean(axis=0)
    table["all"] = w.mean(axis=0)
    return table


# -- bundle persistence -------------------------------------------------------------


def save_bundle(out_dir, bundle: EnsembleBundle, extra_meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, member in enumerate(bundle.members):
        fname = f"member_{i}_{member.tag.replace(':', '_')}.ckpt"
        save_model(out / fname, member.model)
        entries.append({"tag": member.tag, "architecture": member.model.arch,
                        "checkpoint": fname})
    save_params(out / "gate.ckpt", bundle.gate,
                {"gate_config": asdict(bundle.gate_config),
                 "member_tags": bundle.member_tags})
    manifest = {"k": bundle.k, "members": entries, "gate_checkpoint": "gate.ckpt"}
    manifest.update(extra_meta or {})
    path = out / "bundle.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_bundle(path) -> EnsembleBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    base = path.parent
    manifest = json.loads(path.read_text())
    members = [Member(e["tag"], load_model(base / e["checkpoint"]))
               for e in manifest["members"]]
    gate, gate_meta = load_params(base / manifest["gate_checkpoint"])
    cfg = GateConfig(**gate_meta["gate_config"])
    return EnsembleBundle(members, gate, cfg)
