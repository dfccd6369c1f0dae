"""Command-line entry point.

Subcommands: synth, train, eval, transfer, ensemble, occlude. Every run
writes its fully resolved configuration (with a content hash) into its run
directory, and all randomness flows from the run's seed. JSON config files
supply defaults; explicit flags win; unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ensemble as ens
from .checkpoint import sha256_file
from .data import (DEFAULT_MIN_OVERLAP_S, DEFAULT_WINDOW_S, SynthConfig,
                   builtin_montage, load_cohort, make_windows, save_cohort,
                   synth_cohort, windows_for_cohort)
from .evaluation import (MetricReport, _fold_metrics, evaluate_models,
                         load_split, save_split, split_for_cohort,
                         transfer_eval, windows_by_neonate, assert_no_leakage)
from .interpret import occlusion_map
from .models import config_from_dict, load_model
from .training import TrainConfig, fit

DEFAULT_RUNS_DIR_ENV = "STATENET_RUNS_DIR"


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _runs_dir(args) -> Path:
    if args.runs_dir:
        return Path(args.runs_dir)
    return Path(os.environ.get(DEFAULT_RUNS_DIR_ENV, "runs"))


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return _runs_dir(args) / f"{command}-{stamp}"


def _resolve(args, defaults: dict) -> dict:
    """defaults <- config file <- explicit CLI flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        payload = json.loads(Path(args.config).read_text())
        unknown = set(payload) - set(defaults)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        resolved.update(payload)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _write_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **resolved}
    payload["config_hash"] = config_hash(payload)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        lam=resolved["lam"], learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"], max_epochs=resolved["epochs"],
        patience=resolved["patience"], seed=resolved["seed"],
        pos_weight=resolved["pos_weight"], dtype=resolved["dtype"])


_TRAIN_DEFAULTS = {
    "arch": "statenet", "folds": 4, "fold": None, "seed": 0, "epochs": 30,
    "batch_size": 32, "learning_rate": 1e-3, "lam": 1e-4, "patience": 5,
    "pos_weight": 1.0, "dtype": "float64", "val_neonates": 0,
    "window_s": DEFAULT_WINDOW_S, "min_overlap_s": DEFAULT_MIN_OVERLAP_S,
    "model_config": {}, "jobs": 1,
}


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    defaults = {
        "neonates": 12, "seed": 7, "montage": "18", "minutes": 40.0,
        "seizure_rate": 6.0, "window_s": DEFAULT_WINDOW_S,
        "min_overlap_s": DEFAULT_MIN_OVERLAP_S,
        "synth_overrides": {},
    }
    resolved = _resolve(args, defaults)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise SystemExit(f"output directory {out} is not empty (use --force)")
    montage = builtin_montage(resolved["montage"])
    cfg = SynthConfig(
        n_neonates=int(resolved["neonates"]), seed=int(resolved["seed"]),
        montage=montage, minutes_per_neonate=float(resolved["minutes"]),
        seizure_rate_per_hour=float(resolved["seizure_rate"]),
        **{k: tuple(v) if isinstance(v, list) else v
           for k, v in resolved["synth_overrides"].items()})
    cohort = synth_cohort(cfg)
    meta = {"seed": cfg.seed, "n_neonates": cfg.n_neonates,
            "montage": montage.name, "config_hash": config_hash(resolved)}
    manifest = save_cohort(cohort, out, meta)
    _write_config(out, "synth", resolved)

    windows = windows_for_cohort(cohort, resolved["window_s"],
                                 resolved["min_overlap_s"])
    labels = np.asarray([w.y for w in windows])
    hours = sum(r.duration_s for r in cohort) / 3600.0
    prevalence = float(labels.mean()) if labels.size else 0.0
    print(f"cohort: {len(cohort)} neonates, {hours:.2f} h, "
          f"{len(windows)} windows, prevalence {prevalence:.3f}")
    print(f"manifest: {manifest}")
    return 0


# -- train ---------------------------------------------------------------------


def _fit_one_fold(cohort, split, fold_id: int, resolved: dict, out_dir: Path):
    table = windows_by_neonate(cohort, resolved["window_s"],
                               resolved["min_overlap_s"])
    train_ids, test_ids = split.folds[fold_id]
    val_n = int(resolved["val_neonates"])
    fit_ids, val_ids = train_ids, ()
    if val_n:
        if val_n >= len(train_ids):
            raise SystemExit("val_neonates must leave at least one train neonate")
        fit_ids, val_ids = train_ids[:-val_n], train_ids[-val_n:]
    train_windows = [w for nid in fit_ids for w in table[nid]]
    val_windows = [w for nid in val_ids for w in table[nid]]
    assert_no_leakage(train_windows + val_windows, test_ids)
    arch = resolved["arch"]
    model_cfg = config_from_dict(arch, resolved["model_config"]) \
        if resolved["model_config"] else None
    montage = cohort[0].montage
    return fit(arch, train_windows, val_windows, _train_config(resolved),
               model_cfg, channels=montage.channels, montage_name=montage.name,
               run_dir=out_dir / f"fold_{fold_id}")


def _train_fold_worker(payload: dict) -> int:
    cohort = load_cohort(payload["data"])
    split = load_split(Path(payload["out"]) / "split.json")
    _fit_one_fold(cohort, split, payload["fold_id"], payload["resolved"],
                  Path(payload["out"]))
    return payload["fold_id"]


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    out = _out_dir(args, "train")
    cohort = load_cohort(args.data)
    split = split_for_cohort(cohort, int(resolved["folds"]), int(resolved["seed"]))
    resolved["data"] = str(args.data)
    _write_config(out, "train", resolved)
    save_split(out / "split.json", split)

    fold_ids = ([int(resolved["fold"])] if resolved["fold"] is not None
                else list(range(split.k)))
    jobs = int(resolved["jobs"])
    if jobs > 1 and len(fold_ids) > 1:
        payloads = [{"data": str(args.data), "out": str(out), "fold_id": f,
                     "resolved": resolved} for f in fold_ids]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for fold_id in pool.map(_train_fold_worker, payloads):
                print(f"fold {fold_id}: done")
    else:
        for fold_id in fold_ids:
            result = _fit_one_fold(cohort, split, fold_id, resolved, out)
            last = result.history[-1]
            print(f"fold {fold_id}: {len(result.history)} epochs, "
                  f"final train loss {last.train_loss:.4f}")
    print(f"run directory: {out}")
    return 0


# -- eval ------------------------------------------------------------------------


def _load_fold_models(run_dir: Path):
    split = load_split(run_dir / "split.json")
    models = []
    paths = []
    for fold_id in range(split.k):
        path = run_dir / f"fold_{fold_id}" / "best.ckpt"
        if not path.exists():
            raise SystemExit(f"missing checkpoint: {path}")
        models.append(load_model(path))
        paths.append(path)
    return split, models, paths


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    cohort = load_cohort(args.data)
    split, models, _ = _load_fold_models(run_dir)
    run_cfg = json.loads((run_dir / "config.json").read_text())
    report = evaluate_models(models, cohort, split,
                             window_s=run_cfg.get("window_s", DEFAULT_WINDOW_S),
                             min_overlap_s=run_cfg.get("min_overlap_s",
                                                       DEFAULT_MIN_OVERLAP_S),
                             metadata={"run": str(run_dir),
                                       "config_hash": run_cfg.get("config_hash")})
    csv_path = report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    _print_report(report)
    print(f"report: {csv_path}")
    return 0


def _print_report(report: MetricReport) -> None:
    for row in report.rows:
        roc = "undefined" if row.auroc is None else f"{row.auroc:.4f}"
        prc = "undefined" if row.auprc is None else f"{row.auprc:.4f}"
        print(f"fold {row.fold_id} [{row.montage}]: auroc {roc}  auprc {prc}  "
              f"({row.n_pos}/{row.n_test} positive)")
    avg_roc = report.avg_auroc
    avg_prc = report.avg_auprc
    print(f"average: auroc {avg_roc if avg_roc is None else f'{avg_roc:.4f}'}  "
          f"auprc {avg_prc if avg_prc is None else f'{avg_prc:.4f}'}")


# -- transfer ----------------------------------------------------------------------


def cmd_transfer(args) -> int:
    if bool(args.run) == bool(args.ckpt):
        raise SystemExit("provide exactly one of --run or --ckpt")
    out = _out_dir(args, "transfer")
    cohort = load_cohort(args.data)
    if args.run:
        run_dir = Path(args.run)
        run_cfg = json.loads((run_dir / "config.json").read_text())
        k = int(args.folds or run_cfg.get("folds", 4))
        seed = int(args.seed if args.seed is not None else run_cfg.get("seed", 0))
        _, _, paths = _load_fold_models(run_dir)
    else:
        paths = [Path(args.ckpt)]
        k = int(args.folds or 4)
        seed = int(args.seed if args.seed is not None else 0)
    before = [sha256_file(p) for p in paths]
    report = transfer_eval(paths, cohort, k=k, seed=seed)
    after = [sha256_file(p) for p in paths]
    assert before == after, "checkpoints must be untouched by transfer"
    resolved = {"data": str(args.data), "checkpoints": [str(p) for p in paths],
                "folds": k, "seed": seed}
    _write_config(out, "transfer", resolved)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    _print_report(report)
    print(f"checkpoint hashes unchanged: {', '.join(h[:12] for h in before)}")
    print(f"report: {out / 'report.csv'}")
    return 0


# -- ensemble ------------------------------------------------------------------------


def _parse_members(spec: str) -> list[tuple[str, str, int | None]]:
    """'gru,tcn,statenet:1,statenet:2' -> [(tag, arch, seed_suffix), ...]."""
    members = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            arch, suffix = token.split(":", 1)
            members.append((token, arch, int(suffix)))
        else:
            members.append((token, token, None))
    if not members:
        raise SystemExit("no ensemble members given")
    return members


def cmd_ensemble(args) -> int:
    defaults = dict(_TRAIN_DEFAULTS)
    defaults.pop("arch")
    defaults.pop("jobs")
    defaults.update({"members": "gru,tcn,statenet:1,statenet:2",
                     "gate_epochs": 5, "gate_hidden": 16, "fold": 0})
    resolved = _resolve(args, defaults)
    out = _out_dir(args, "ensemble")
    cohort = load_cohort(args.data)
    resolved["data"] = str(args.data)
    _write_config(out, "ensemble", resolved)

    table = windows_by_neonate(cohort, resolved["window_s"],
                               resolved["min_overlap_s"])
    split = split_for_cohort(cohort, int(resolved["folds"]), int(resolved["seed"]))
    fold_id = int(resolved["fold"])
    train_ids, test_ids = split.folds[fold_id]
    train_windows = [w for nid in train_ids for w in table[nid]]
    test_windows = [w for nid in test_ids for w in table[nid]]
    assert_no_leakage(train_windows, test_ids)

    montage = cohort[0].montage
    base_cfg = _train_config(resolved)
    members = []
    for tag, arch, suffix in _parse_members(resolved["members"]):
        cfg = TrainConfig(**{**asdict(base_cfg),
                             "seed": base_cfg.seed if suffix is None
                             else base_cfg.seed + suffix})
        result = fit(arch, train_windows, [], cfg,
                     channels=montage.channels, montage_name=montage.name)
        members.append(ens.Member(tag, result.model))
        print(f"member {tag}: trained ({len(result.history)} epochs)")

    gate_cfg = ens.GateConfig(gru_hidden=int(resolved["gate_hidden"]))
    rng = np.random.default_rng(int(resolved["seed"]))
    bundle = ens.make_bundle(members, gate_cfg, rng, base_cfg.np_dtype)
    gate_train_cfg = TrainConfig(**{**asdict(base_cfg),
                                    "max_epochs": int(resolved["gate_epochs"])})
    ens.train_gate(bundle, train_windows, gate_train_cfg)
    ens.save_bundle(out / "bundle", bundle,
                    {"fold": fold_id, "seed": int(resolved["seed"])})

    # member + ensemble test metrics
    rows = []
    labels = [w.y for w in test_windows]
    for member in bundle.members:
        scores = member.model.predict(test_windows, batch_size=base_cfg.batch_size)
        row = _fold_metrics(fold_id, montage.name, scores, labels)
        rows.append((member.tag, row))
    scores = ens.ensemble_predict(np.stack([w.x for w in test_windows]), bundle,
                                  batch_size=base_cfg.batch_size)
    rows.append(("ensemble", _fold_metrics(fold_id, montage.name, scores, labels)))
    with open(out / "report.csv", "w", newline="") as fh:
        fh.write("model,auroc,auprc,n_test,n_pos\n")
        for tag, row in rows:
            fh.write(f"{tag},{'' if row.auroc is None else repr(row.auroc)},"
                     f"{'' if row.auprc is None else repr(row.auprc)},"
                     f"{row.n_test},{row.n_pos}\n")
            roc = "undefined" if row.auroc is None else f"{row.auroc:.4f}"
            print(f"{tag}: auroc {roc}")

    weights = ens.mean_weights_by_neonate(
        bundle, [w for ws in table.values() for w in ws],
        batch_size=base_cfg.batch_size)
    with open(out / "weights_by_neonate.csv", "w", newline="") as fh:
        fh.write("neonate," + ",".join(bundle.member_tags) + "\n")
        for nid, w in weights.items():
            fh.write(nid + "," + ",".join(repr(float(v)) for v in w) + "\n")
    print(f"bundle manifest: {out / 'bundle' / 'bundle.json'}")
    return 0


# -- occlude -------------------------------------------------------------------------


def cmd_occlude(args) -> int:
    out = _out_dir(args, "occlude")
    model = load_model(args.ckpt)
    cohort = load_cohort(args.data)
    recs = {r.recording_id: r for r in cohort}
    if args.recording not in recs:
        raise SystemExit(f"recording {args.recording!r} not in manifest "
                         f"(have {sorted(recs)})")
    rec = recs[args.recording]
    windows = make_windows(rec, args.window_s, args.min_overlap_s)
    if not 0 <= args.window_index < len(windows):
        raise SystemExit(f"window index {args.window_index} out of range "
                         f"(recording has {len(windows)} windows)")
    window = windows[args.window_index]
    fs = rec.sampling_rate_hz
    occ_len = max(1, int(round(args.occ_len_s * fs)))
    stride = max(1, int(round(args.stride_s * fs)))
    omap = occlusion_map(model, window.x, occ_len=occ_len, stride=stride,
                         mode=args.mode, sampling_rate_hz=fs)
    omap.meta.update({"recording": rec.recording_id, "neonate": rec.neonate_id,
                      "window_index": args.window_index,
                      "window_offset_s": window.offset_s, "label": window.y,
                      "checkpoint": str(args.ckpt)})
    resolved = {"ckpt": str(args.ckpt), "data": str(args.data),
                "recording": args.recording, "window_index": args.window_index,
                "occ_len_s": args.occ_len_s, "stride_s": args.stride_s,
                "mode": args.mode}
    _write_config(out, "occlude", resolved)
    csv_path = omap.write_csv(out / "occlusion.csv")
    omap.write_json(out / "occlusion.json")
    if args.plot:
        _plot_heatmap(omap, out / "occlusion.png")
        print(f"heatmap: {out / 'occlusion.png'}")
    region = omap.argmax_region()
    print(f"base score {omap.base_score:.4f}; strongest region "
          f"{region['start_s']:.1f}-{region['end_s']:.1f}s "
          f"(heat {region['heat']:.4f})")
    print(f"map: {csv_path}")
    return 0


def _plot_heatmap(omap, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(9, 3))
    extent = [omap.position_starts[0] / omap.sampling_rate_hz,
              (omap.position_starts[-1] + omap.occ_len) / omap.sampling_rate_hz,
              -0.5, omap.heat.shape[0] - 0.5]
    im = ax.imshow(omap.heat, aspect="auto", origin="lower", extent=extent,
                   cmap="magma")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("channel" if omap.mode == "channel-temporal" else "")
    fig.colorbar(im, ax=ax, label="heat")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statenet",
        description="Synthesize cohorts, train/evaluate seizure detectors, "
                    "transfer across montages, ensemble, and localize.")
    parser.add_argument("--runs-dir", default=None,
                        help=f"output root (default ${DEFAULT_RUNS_DIR_ENV} or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--neonates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--montage", choices=["18", "3"])
    p.add_argument("--minutes", type=float)
    p.add_argument("--seizure-rate", dest="seizure_rate", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="patient-wise k-fold training")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--arch", choices=["statenet", "gru", "tcn"])
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--pos-weight", dest="pos_weight", type=float)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--val-neonates", dest="val_neonates", type=int)
    p.add_argument("--jobs", type=int, help="opt-in fold-level parallelism")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a training run on test folds")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("transfer", help="evaluate checkpoints on another montage")
    p.add_argument("--data", required=True)
    p.add_argument("--run")
    p.add_argument("--ckpt")
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("ensemble", help="train members + gate, report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--members")
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gate-epochs", dest="gate_epochs", type=int)
    p.add_argument("--gate-hidden", dest="gate_hidden", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("occlude", help="occlusion map for one window")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--recording", required=True)
    p.add_argument("--window-index", dest="window_index", type=int, default=0)
    p.add_argument("--window-s", dest="window_s", type=float,
                   default=DEFAULT_WINDOW_S)
    p.add_argument("--min-overlap-s", dest="min_overlap_s", type=float,
                   default=DEFAULT_MIN_OVERLAP_S)
    p.add_argument("--occ-len-s", dest="occ_len_s", type=float, default=1.0)
    p.add_argument("--stride-s", dest="stride_s", type=float, default=0.5)
    p.add_argument("--mode", choices=["temporal", "channel-temporal"],
                   default="temporal")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_occlude)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except Exception as exc:  # surface errors with a nonzero exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
