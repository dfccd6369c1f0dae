"""Acceptance gate: every criterion runs at its stated tolerance and prints
one PASS/FAIL line (visible with `pytest tests/test_acceptance.py -v -s`).

The reference synthetic benchmark is fixed: 12 neonates, seed 7, 18-channel
montage, ~40 minutes per neonate. Training-heavy criteria share session
fixtures so each model is trained once. Verification criteria (gradients,
metrics, invariances, reproducibility) run in float64; benchmark training
runs in float32 for speed, which the numerics contract explicitly permits.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest
from conftest import auprc_oracle, auroc_oracle

from statenet import autodiff as ad
from statenet import ensemble as ens
from statenet.autodiff import bce_l2_loss, grad_check
from statenet.checkpoint import sha256_file
from statenet.data import (SynthConfig, builtin_montage, synth_cohort,
                           synth_event_schedule)
from statenet.errors import ShapeMismatchError
from statenet.evaluation import cross_validate, transfer_eval, windows_by_neonate
from statenet.interpret import occlusion_map
from statenet.metrics import auprc, auroc
from statenet.models import (GruClassifierConfig, StateNetConfig,
                             TcnClassifierConfig, init_statenet_params,
                             new_model, save_model, statenet_forward)
from statenet.training import TrainConfig, fit

# -- the reference benchmark, frozen ------------------------------------------------

INPUT_SCALE = 1.0 / 15.0   # benchmark signals are ~15 uV RMS; start features O(1)
REF_SYNTH = dict(n_neonates=12, seed=7, minutes_per_neonate=40.0,
                 seizure_rate_per_hour=12.0, event_duration_range_s=(15.0, 35.0),
                 seizure_amplitude_range=(2.3, 3.8))
REF_MODEL = StateNetConfig(tcn_layers=3, kernel_size=3, hidden_dim=3,
                           gat_layers=2, mlp_hidden=8, input_scale=INPUT_SCALE)
REF_TRAIN = TrainConfig(lam=1e-4, learning_rate=1.3e-2, batch_size=16,
                        max_epochs=6, seed=7, dtype="float32")
MEMBER_TRAIN = TrainConfig(lam=1e-4, learning_rate=7e-3, batch_size=16,
                           max_epochs=6, seed=7, dtype="float32")
# the simplex invariant is checked in test mode: float64 keeps softmax
# strictly inside (0,1) where confident float32 gates underflow to exact 0
GATE_TRAIN = TrainConfig(lam=1e-4, learning_rate=1e-2, batch_size=16,
                         max_epochs=12, seed=7, dtype="float64")
WINDOW_S = 30.0
FS = 200.0


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def bench18():
    cfg = SynthConfig(montage=builtin_montage(18), **REF_SYNTH)
    cohort = synth_cohort(cfg)
    return {"cfg": cfg, "cohort": cohort, "table": windows_by_neonate(cohort),
            "schedule": synth_event_schedule(cfg)}


@pytest.fixture(scope="session")
def bench3():
    cfg = SynthConfig(montage=builtin_montage(3), **REF_SYNTH)
    cohort = synth_cohort(cfg)
    return {"cfg": cfg, "cohort": cohort}


@pytest.fixture(scope="session")
def cv18(bench18, tmp_path_factory):
    runs = tmp_path_factory.mktemp("accept18")
    t0 = time.perf_counter()
    result = cross_validate("statenet", bench18["cohort"], k=4, cfg=REF_TRAIN,
                            model_config=REF_MODEL, runs_dir=runs)
    return {"result": result, "elapsed": time.perf_counter() - t0, "runs": runs}


@pytest.fixture(scope="session")
def cv3(bench3, tmp_path_factory):
    runs = tmp_path_factory.mktemp("accept3")
    result = cross_validate("statenet", bench3["cohort"], k=4, cfg=REF_TRAIN,
                            model_config=REF_MODEL, runs_dir=runs)
    return {"result": result, "runs": runs}


# -- 1. gradient correctness ---------------------------------------------------------


def test_criterion_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1234)
    worst = {}

    def nudge(params):
        for _, t in params.trainable_items():
            t.data += rng.uniform(0.01, 0.05, size=t.data.shape)

    for c in (1, 2, 3):
        cfg = StateNetConfig(tcn_layers=2, kernel_size=3, hidden_dim=4,
                             gat_layers=2, mlp_hidden=4)
        params = init_statenet_params(cfg, rng)
        nudge(params)
        x = rng.standard_normal((2, c, 64))
        y = np.array([1.0, 0.0])
        err = grad_check(lambda: bce_l2_loss(statenet_forward(x, params, cfg),
                                             y, params, lam=1e-3),
                         params, eps=1e-6, max_coords_per_tensor=8, rng=rng)
        worst[f"statenet(C={c})"] = err

    for arch, cfg in (("gru", GruClassifierConfig(hidden_dim=4)),
                      ("tcn", TcnClassifierConfig(tcn_layers=2, hidden_dim=4))):
        for c in (1, 2, 3):
            model = new_model(arch, cfg, n_channels=c, rng=rng)
            nudge(model.params)
            x = rng.standard_normal((2, c, 64))
            y = np.array([0.0, 1.0])
            err = grad_check(lambda: bce_l2_loss(model.forward(x), y,
                                                 model.params, lam=1e-3),
                             model.params, eps=1e-6, max_coords_per_tensor=8,
                             rng=rng)
            worst[f"{arch}(C={c})"] = err

    elapsed = time.perf_counter() - t0
    peak = max(worst.values())
    _report("gradient-correctness",
            peak <= 1e-4 and elapsed < 120.0,
            f"max rel err {peak:.2e} over {sorted(worst)} in {elapsed:.1f}s")


# -- 2. metric oracles ---------------------------------------------------------------


def test_criterion_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    n_exact = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.permutation(n) / n  # distinct scores
        assert auroc(scores, labels) == auroc_oracle(scores, labels)
        assert auprc(scores, labels) == auprc_oracle(scores, labels)
        n_exact += 1
    elapsed = time.perf_counter() - t0
    _report("metric-oracles", n_exact == 1000 and elapsed < 60.0,
            f"{n_exact}/1000 instances exact in {elapsed:.1f}s")


# -- 3. permutation invariance --------------------------------------------------------


def test_criterion_permutation_invariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        cfg = StateNetConfig(tcn_layers=2, kernel_size=3, hidden_dim=3,
                             gat_layers=2, mlp_hidden=4)
        params = init_statenet_params(cfg, np.random.default_rng(trial))
        c = int(rng.integers(2, 19))
        x = rng.standard_normal((c, 128))
        base = statenet_forward(x, params, cfg).item()
        perm = rng.permutation(c)
        diff = abs(statenet_forward(x[perm], params, cfg).item() - base)
        worst = max(worst, diff)
    _report("permutation-invariance", worst <= 1e-12,
            f"max |f(x) - f(perm x)| = {worst:.2e} over 100 trials (float64)")


# -- 4. montage agnosticism ------------------------------------------------------------


def test_criterion_montage_agnosticism():
    rng = np.random.default_rng(3)
    model = new_model("statenet", REF_MODEL, rng=rng)
    probs = {}
    for c in (1, 3, 18):
        probs[c] = float(model.predict(rng.standard_normal((c, 256))[None])[0])
        assert 0.0 < probs[c] < 1.0
    raised = {}
    for arch in ("gru", "tcn"):
        baseline = new_model(arch, None, n_channels=18, rng=rng)
        baseline.forward(np.zeros((18, 64)))
        with pytest.raises(ShapeMismatchError):
            baseline.forward(np.zeros((3, 64)))
        raised[arch] = True
    _report("montage-agnosticism", True,
            f"one parameter set scored C=1/3/18 ({probs}); "
            f"baselines raised ShapeMismatchError on mismatched C")


# -- 5. learnability --------------------------------------------------------------------


def test_criterion_learnability(cv18):
    report = cv18["result"].report
    ok = (report.avg_auroc is not None and report.avg_auroc >= 0.90
          and report.avg_auprc >= 0.70 and cv18["elapsed"] <= 900.0)
    folds = [(r.fold_id, round(r.auroc, 4), round(r.auprc, 4))
             for r in report.rows]
    _report("learnability",
            ok,
            f"4-fold avg AUROC {report.avg_auroc:.4f} (>=0.90), "
            f"avg AUPRC {report.avg_auprc:.4f} (>=0.70), "
            f"runtime {cv18['elapsed']:.0f}s (<=900s); folds {folds}")


def test_training_loss_decreases_on_benchmark(cv18):
    """Every fold's final-epoch training loss is below its first epoch's."""
    for fold_id in range(4):
        history_csv = (cv18["runs"] / f"fold_{fold_id}" / "history.csv").read_text()
        losses = [float(line.split(",")[1])
                  for line in history_csv.strip().splitlines()[1:]]
        assert losses[-1] < losses[0], f"fold {fold_id}: {losses}"


# -- 6. montage transfer -----------------------------------------------------------------


def test_criterion_transfer(cv18, cv3, bench3):
    ckpts = [cv18["runs"] / f"fold_{i}" / "best.ckpt" for i in range(4)]
    before = [sha256_file(p) for p in ckpts]
    report = transfer_eval(ckpts, bench3["cohort"], k=4, seed=REF_TRAIN.seed)
    after = [sha256_file(p) for p in ckpts]
    native = cv3["result"].report.avg_auroc
    drop = native - report.avg_auroc
    ok = (report.avg_auroc >= native - 0.15) and before == after
    _report("transfer",
            ok,
            f"18->3 transferred AUROC {report.avg_auroc:.4f} vs native "
            f"{native:.4f} (drop {drop:+.4f} <= 0.15), checkpoint hashes "
            f"unchanged ({len(ckpts)} files)")


# -- 7. ensemble gain --------------------------------------------------------------------


@pytest.fixture(scope="session")
def moe_bundle(bench18, cv18, tmp_path_factory):
    """Members trained on rotating neonate subsets of fold 0's train side
    (classic bagging diversity), gate trained on the full train side."""
    table = bench18["table"]
    train_ids, test_ids = cv18["result"].split.folds[0]
    rotations = [list(train_ids[i:]) + list(train_ids[:i]) for i in (0, 2, 4, 6)]
    subsets = [sorted(r[:4]) for r in rotations]
    specs = [("gru", "gru",
              GruClassifierConfig(hidden_dim=16, input_scale=INPUT_SCALE), 4, 8),
             ("tcn", "tcn",
              TcnClassifierConfig(tcn_layers=3, kernel_size=3, hidden_dim=8,
                                  input_scale=INPUT_SCALE), 3, 9),
             ("statenet:1", "statenet", REF_MODEL, 6, 10),
             ("statenet:2", "statenet", REF_MODEL, 6, 11)]
    members = []
    for (tag, arch, mcfg, epochs, seed), subset in zip(specs, subsets):
        cfg = replace(MEMBER_TRAIN, max_epochs=epochs, seed=seed)
        sub_w = [w for nid in subset for w in table[nid]]
        result = fit(arch, sub_w, [], cfg, mcfg)
        members.append(ens.Member(tag, result.model))

    bundle = ens.make_bundle(members,
                             ens.GateConfig(gru_hidden=16, input_scale=INPUT_SCALE),
                             np.random.default_rng(7), np.float64)
    ckpt_dir = tmp_path_factory.mktemp("members")
    paths = []
    for i, m in enumerate(bundle.members):
        path = ckpt_dir / f"member_{i}.ckpt"
        save_model(path, m.model)
        paths.append(path)
    hashes_before = [sha256_file(p) for p in paths]

    train_w = [w for nid in train_ids for w in table[nid]]
    ens.train_gate(bundle, train_w, GATE_TRAIN)
    return {"bundle": bundle, "train_ids": train_ids, "test_ids": test_ids,
            "paths": paths, "hashes_before": hashes_before,
            "ckpt_dir": ckpt_dir}


def test_criterion_ensemble_gain(bench18, moe_bundle):
    bundle = moe_bundle["bundle"]
    table = bench18["table"]
    test_w = [w for nid in moe_bundle["test_ids"] for w in table[nid]]
    ys = [w.y for w in test_w]
    x = np.stack([w.x for w in test_w])

    member_rocs = {m.tag: auroc(m.model.predict(test_w, batch_size=32), ys)
                   for m in bundle.members}
    moe_roc = auroc(ens.ensemble_predict(x, bundle, batch_size=32), ys)
    best = max(member_rocs.values())

    weights = ens.gate_weights(x, bundle, batch_size=32)
    on_simplex = (np.all(weights > 0) and np.all(weights < 1)
                  and np.abs(weights.sum(axis=1) - 1.0).max() <= 1e-9)

    # member checkpoints byte-identical after gate training
    frozen = True
    for i, m in enumerate(bundle.members):
        path = moe_bundle["ckpt_dir"] / f"member_{i}_after.ckpt"
        save_model(path, m.model)
        if sha256_file(path) != moe_bundle["hashes_before"][i]:
            frozen = False

    ok = (moe_roc >= best - 0.02) and on_simplex and frozen
    _report("ensemble-gain",
            ok,
            f"MoE AUROC {moe_roc:.4f} >= max member {best:.4f} - 0.02 "
            f"(members {dict((k, round(v, 3)) for k, v in member_rocs.items())}); "
            f"weights on simplex for all {len(test_w)} samples: {on_simplex}; "
            f"base checkpoints byte-identical: {frozen}")


def test_ensemble_per_neonate_weight_diversity(bench18, moe_bundle):
    """Sample-level gating differentiates neonates (Fig.-5-style analysis)."""
    table = bench18["table"]
    all_windows = [w for ws in table.values() for w in ws]
    wt = ens.mean_weights_by_neonate(moe_bundle["bundle"], all_windows,
                                     batch_size=32)
    neo = {k: v for k, v in wt.items() if k != "all"}
    ids = sorted(neo)
    l1 = max(float(np.abs(neo[a] - neo[b]).sum())
             for a in ids for b in ids)
    _report("ensemble-weight-diversity", l1 > 0.05,
            f"max pairwise L1 distance of per-neonate mean gate weights "
            f"{l1:.4f} (> 0.05)")


# -- 8. localization sanity ---------------------------------------------------------------


def test_criterion_localization(bench18, cv18):
    table = bench18["table"]
    schedule = bench18["schedule"]
    occ_len, stride = 200, 100
    total = correct = 0
    for fold_run in cv18["result"].folds:
        model = fold_run.model
        for nid in fold_run.test_ids:
            for w in table[nid]:
                if w.y != 1:
                    continue
                span = (w.offset_s, w.offset_s + WINDOW_S)
                hits = [(s, e) for s, e in schedule[nid]
                        if min(e, span[1]) - max(s, span[0]) > 0]
                if len(hits) != 1:
                    continue  # criterion covers single-injected-event windows
                if model.predict(w.x[None])[0] <= 0.5:
                    continue  # only true positives
                omap = occlusion_map(model, np.asarray(w.x, dtype=np.float64),
                                     occ_len=occ_len, stride=stride,
                                     mode="temporal", sampling_rate_hz=FS)
                centers = (omap.position_starts + occ_len / 2) / FS + w.offset_s
                inside = (centers >= hits[0][0]) & (centers < hits[0][1])
                if inside.all() or not inside.any():
                    continue  # event covers the whole window: no outside set
                total += 1
                if omap.heat[0, inside].mean() > omap.heat[0, ~inside].mean():
                    correct += 1
    rate = correct / total if total else 0.0
    _report("localization-sanity",
            total >= 20 and rate >= 0.80,
            f"heat(inside event) > heat(outside) for {correct}/{total} "
            f"= {rate:.3f} of single-event true positives (>= 0.80)")


# -- 9. reproducibility -------------------------------------------------------------------


def test_criterion_reproducibility(tmp_path_factory):
    cfg = SynthConfig(montage=builtin_montage(3), n_neonates=4, seed=11,
                      minutes_per_neonate=8.0, seizure_rate_per_hour=15.0,
                      event_duration_range_s=(15.0, 30.0))
    cohort = synth_cohort(cfg)
    train_cfg = TrainConfig(lam=1e-4, learning_rate=5e-3, batch_size=8,
                            max_epochs=2, seed=5, dtype="float64")
    model_cfg = StateNetConfig(tcn_layers=2, kernel_size=3, hidden_dim=3,
                               gat_layers=1, mlp_hidden=4,
                               input_scale=INPUT_SCALE)
    outs = []
    for run in ("a", "b"):
        runs = tmp_path_factory.mktemp(f"repro_{run}")
        cross_validate("statenet", cohort, k=2, cfg=train_cfg,
                       model_config=model_cfg, runs_dir=runs)
        outs.append(runs)

    identical = {}
    for rel in ("fold_0/best.ckpt", "fold_0/final.ckpt", "fold_1/best.ckpt",
                "fold_1/final.ckpt", "fold_0/history.csv", "fold_1/history.csv",
                "report.csv", "report.json", "split.json"):
        identical[rel] = ((outs[0] / rel).read_bytes()
                          == (outs[1] / rel).read_bytes())
    ok = all(identical.values())
    _report("reproducibility",
            ok,
            f"two identical float64 runs: checkpoints + reports bitwise "
            f"identical = {identical}")
