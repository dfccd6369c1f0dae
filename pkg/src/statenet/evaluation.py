"""Cross-validation and montage-transfer evaluation harness.

Folds are patient-wise: a neonate's windows never cross the train/test
boundary, and the harness refuses to run if they would. Folds whose test
labels are single-class get `None` metrics and are excluded from the
averages with a logged warning, never imputed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import sha256_file
from .data import (DEFAULT_MIN_OVERLAP_S, DEFAULT_WINDOW_S, FoldSplit,
                   Recording, make_windows, patient_folds)
from .errors import NotTransferableError, UndefinedMetricError
from .metrics import auprc, auroc
from .models import Model, load_model
from .training import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class FoldMetrics:
    fold_id: int
    montage: str
    auroc: float | None
    auprc: float | None
    n_test: int
    n_pos: int


@dataclass
class MetricReport:
    rows: list[FoldMetrics]
    metadata: dict = field(default_factory=dict)

    def _defined(self, key: str) -> list[float]:
        return [getattr(r, key) for r in self.rows if getattr(r, key) is not None]

    @property
    def avg_auroc(self) -> float | None:
        vals = self._defined("auroc")
        return float(np.mean(vals)) if vals else None

    @property
    def avg_auprc(self) -> float | None:
        vals = self._defined("auprc")
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "folds": [asdict(r) for r in self.rows],
            "average": {"auroc": self.avg_auroc, "auprc": self.avg_auprc},
            "metadata": self.metadata,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "montage", "auroc", "auprc", "n_test", "n_pos"])
            for r in self.rows:
                writer.writerow([r.fold_id, r.montage,
                                 "" if r.auroc is None else repr(r.auroc),
                                 "" if r.auprc is None else repr(r.auprc),
                                 r.n_test, r.n_pos])
            mont = self.rows[0].montage if self.rows else ""
            writer.writerow(["average", mont,
                             "" if self.avg_auroc is None else repr(self.avg_auroc),
                             "" if self.avg_auprc is None else repr(self.avg_auprc),
                             sum(r.n_test for r in self.rows),
                             sum(r.n_pos for r in self.rows)])
        return path


@dataclass
class FoldRun:
    fold_id: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    model: Model
    test_scores: np.ndarray
    test_labels: np.ndarray
    run_dir: Path | None = None


@dataclass
class CrossValResult:
    report: MetricReport
    folds: list[FoldRun]
    split: FoldSplit


def windows_by_neonate(cohort: list[Recording], window_s: float = DEFAULT_WINDOW_S,
                       min_overlap_s: float = DEFAULT_MIN_OVERLAP_S) -> dict[str, list]:
    table: dict[str, list] = {}
    for rec in cohort:
        table.setdefault(rec.neonate_id, []).extend(
            make_windows(rec, window_s, min_overlap_s))
    return table


def assert_no_leakage(windows, test_ids) -> None:
    leaked = {w.neonate_id for w in windows} & set(test_ids)
    if leaked:
        raise RuntimeError(f"patient-wise leakage: {sorted(leaked)} appear in "
                           f"both train and test")


def _fold_metrics(fold_id: int, montage: str, scores, labels) -> FoldMetrics:
    labels = np.asarray(labels)
    row = FoldMetrics(fold_id, montage, None, None,
                      n_test=len(labels), n_pos=int(labels.sum()))
    try:
        row.auroc = auroc(scores, labels)
    except UndefinedMetricError as exc:
        log.warning("fold %d: auroc undefined (%s); excluded from average",
                    fold_id, exc)
    try:
        row.auprc = auprc(scores, labels)
    except UndefinedMetricError as exc:
        log.warning("fold %d: auprc undefined (%s); excluded from average",
                    fold_id, exc)
    return row


def _montage_name(cohort: list[Recording]) -> str:
    names = {rec.montage.name for rec in cohort}
    if len(names) != 1:
        raise ValueError(f"cohort mixes montages: {sorted(names)}")
    return names.pop()


def split_for_cohort(cohort: list[Recording], k: int, seed: int) -> FoldSplit:
    ids = sorted({rec.neonate_id for rec in cohort})
    return patient_folds(ids, k, seed)


def cross_validate(arch: str, cohort: list[Recording], k: int, cfg: TrainConfig,
                   model_config=None, runs_dir=None, val_neonates: int = 0,
                   window_s: float = DEFAULT_WINDOW_S,
                   min_overlap_s: float = DEFAULT_MIN_OVERLAP_S) -> CrossValResult:
    """Train on each fold's train neonates, evaluate on its test neonates."""
    table = windows_by_neonate(cohort, window_s, min_overlap_s)
    split = split_for_cohort(cohort, k, cfg.seed)
    montage = _montage_name(cohort)
    channels = cohort[0].montage.channels
    rows, fold_runs = [], []
    for fold_id, (train_ids, test_ids) in enumerate(split.folds):
        fit_ids, val_ids = train_ids, ()
        if val_neonates:
            if val_neonates >= len(train_ids):
                raise ValueError("val_neonates must leave at least one train neonate")
            fit_ids, val_ids = train_ids[:-val_neonates], train_ids[-val_neonates:]
        train_windows = [w for nid in fit_ids for w in table[nid]]
        val_windows = [w for nid in val_ids for w in table[nid]]
        assert_no_leakage(train_windows + val_windows, test_ids)
        run_dir = Path(runs_dir) / f"fold_{fold_id}" if runs_dir else None
        result = fit(arch, train_windows, val_windows, cfg, model_config,
                     channels=channels, montage_name=montage, run_dir=run_dir)
        test_windows = [w for nid in test_ids for w in table[nid]]
        scores = result.model.predict(test_windows, batch_size=cfg.batch_size)
        labels = np.asarray([w.y for w in test_windows])
        rows.append(_fold_metrics(fold_id, montage, scores, labels))
        fold_runs.append(FoldRun(fold_id, train_ids, test_ids, result.model,
                                 scores, labels, run_dir))
    resolved = {
        "architecture": arch, "k": k, "seed": cfg.seed, "montage": montage,
        "train_config": asdict(cfg),
        "model_config": asdict(model_config) if model_config is not None else None,
    }
    config_hash = hashlib.sha256(
        json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:16]
    report = MetricReport(rows, metadata={**resolved, "config_hash": config_hash})
    if runs_dir is not None:
        save_split(Path(runs_dir) / "split.json", split)
        report.write_csv(Path(runs_dir) / "report.csv")
        report.write_json(Path(runs_dir) / "report.json")
    return CrossValResult(report, fold_runs, split)


def save_split(path, split: FoldSplit) -> None:
    payload = [{"fold": i, "train": list(tr), "test": list(te)}
               for i, (tr, te) in enumerate(split.folds)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))


def load_split(path) -> FoldSplit:
    payload = json.loads(Path(path).read_text())
    return FoldSplit(tuple((tuple(e["train"]), tuple(e["test"])) for e in payload))


def evaluate_models(models: list[Model], cohort: list[Recording], split: FoldSplit,
                    batch_size: int = 64, window_s: float = DEFAULT_WINDOW_S,
                    min_overlap_s: float = DEFAULT_MIN_OVERLAP_S,
                    metadata: dict | None = None) -> MetricReport:
    """Score per-fold models on their fold's test neonates (no training)."""
    if len(models) not in (1, split.k):
        raise ValueError(f"need 1 or {split.k} models, got {len(models)}")
    table = windows_by_neonate(cohort, window_s, min_overlap_s)
    montage = _montage_name(cohort)
    rows = []
    for fold_id, (_, test_ids) in enumerate(split.folds):
        model = models[fold_id % len(models)] if len(models) > 1 else models[0]
        test_windows = [w for nid in test_ids for w in table[nid]]
        scores = model.predict(test_windows, batch_size=batch_size)
        labels = [w.y for w in test_windows]
        rows.append(_fold_metrics(fold_id, montage, scores, labels))
    return MetricReport(rows, metadata=metadata or {})


def transfer_eval(checkpoints, cohort: list[Recording], k: int, seed: int,
                  batch_size: int = 64, window_s: float = DEFAULT_WINDOW_S,
                  min_overlap_s: float = DEFAULT_MIN_OVERLAP_S) -> MetricReport:
    """Evaluate trained checkpoints on a cohort with a different montage.

    No parameter update happens; the checkpoint files are hashed before and
    after and the hashes are recorded in the report metadata. Montage-fixed
    architectures are refused.
    """
    paths = [Path(p) for p in ([checkpoints] if isinstance(checkpoints, (str, Path))
                               else list(checkpoints))]
    hashes_before = [sha256_file(p) for p in paths]
    models = [load_model(p) for p in paths]
    target_c = cohort[0].montage.n_channels
    for p, model in zip(paths, models):
        if not model.montage_agnostic:
            raise NotTransferableError(
                f"{p.name}: architecture {model.arch!r} is montage-fixed and "
                f"not transferable to a {target_c}-channel montage")
    split = split_for_cohort(cohort, k, seed)
    report = evaluate_models(models, cohort, split, batch_size,
                             window_s, min_overlap_s)
    hashes_after = [sha256_file(p) for p in paths]
    if hashes_before != hashes_after:
        raise RuntimeError("checkpoint files changed during transfer evaluation")
    report.metadata.update({
        "transfer": True,
        "checkpoints": [str(p) for p in paths],
        "checkpoint_sha256": hashes_before,
        "target_montage": _montage_name(cohort),
        "k": k, "seed": seed,
    })
    return report
