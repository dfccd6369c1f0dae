import json

import numpy as np
import pytest

from statenet.cli import main
from statenet.data import load_cohort

TINY_MODEL_CFG = {"tcn_layers": 2, "kernel_size": 3, "hidden_dim": 3,
                  "gat_layers": 1, "mlp_hidden": 4}


def _synth_args(out, montage="3", neonates=3, minutes=3.0, rate=30.0, seed=5):
    return ["synth", "--out", str(out), "--neonates", str(neonates),
            "--seed", str(seed), "--montage", montage,
            "--minutes", str(minutes), "--seizure-rate", str(rate)]


@pytest.fixture(scope="module")
def cohort3(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort3")
    cfg = tmp_path_factory.mktemp("cfg") / "synth.json"
    cfg.write_text(json.dumps({
        "synth_overrides": {"event_duration_range_s": [15.0, 35.0]}}))
    assert main(_synth_args(out) + ["--force", "--config", str(cfg)]) == 0
    return out


@pytest.fixture(scope="module")
def run3(cohort3, tmp_path_factory):
    out = tmp_path_factory.mktemp("run3")
    cfg = tmp_path_factory.mktemp("traincfg") / "train.json"
    cfg.write_text(json.dumps({"model_config": TINY_MODEL_CFG}))
    code = main(["train", "--data", str(cohort3 / "manifest.json"),
                 "--arch", "statenet", "--folds", "3", "--seed", "2",
                 "--epochs", "2", "--batch-size", "8", "--dtype", "float32",
                 "--config", str(cfg), "--out", str(out)])
    assert code == 0
    return out


class TestSynth:
    def test_writes_manifest_and_config(self, cohort3):
        assert (cohort3 / "manifest.json").exists()
        cfg = json.loads((cohort3 / "config.json").read_text())
        assert cfg["command"] == "synth"
        assert "config_hash" in cfg

    def test_montage3_channels_exact(self, cohort3):
        cohort = load_cohort(cohort3 / "manifest.json")
        assert cohort[0].montage.channels == ("C3-P3", "C4-P4", "P3-P4")

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(_synth_args(a, neonates=2, minutes=2.0)) == 0
        assert main(_synth_args(b, neonates=2, minutes=2.0)) == 0
        for name in ("rec00.f32", "rec01.f32"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_rate_prevalence_zero(self, tmp_path, capsys):
        out = tmp_path / "quiet"
        assert main(_synth_args(out, rate=0.0, neonates=2, minutes=2.0)) == 0
        assert "prevalence 0.000" in capsys.readouterr().out

    def test_refuses_nonempty_without_force(self, tmp_path):
        out = tmp_path / "dir"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        with pytest.raises(SystemExit):
            main(_synth_args(out))

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        with pytest.raises(SystemExit):
            main(_synth_args(tmp_path / "o") + ["--config", str(cfg)])


class TestTrainEval:
    def test_fold_artifacts(self, run3):
        for fold in range(3):
            for name in ("config.json", "history.csv", "best.ckpt", "final.ckpt"):
                assert (run3 / f"fold_{fold}" / name).exists()
        assert (run3 / "split.json").exists()
        cfg = json.loads((run3 / "config.json").read_text())
        assert cfg["arch"] == "statenet"

    def test_eval_emits_report(self, run3, cohort3, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main(["eval", "--run", str(run3),
                     "--data", str(cohort3 / "manifest.json"),
                     "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "report:" in text
        lines = (out / "report.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 3 + 1  # header + 3 folds + average
        assert lines[-1].startswith("average")
        payload = json.loads((out / "report.json").read_text())
        assert len(payload["folds"]) == 3

    def test_missing_data_nonzero_exit(self, run3):
        assert main(["eval", "--run", str(run3), "--data", "/nope/x.json"]) == 1


class TestTransfer:
    def test_transfer_to_other_montage(self, run3, tmp_path, capsys):
        data18 = tmp_path / "cohort18"
        assert main(_synth_args(data18, montage="18", neonates=3,
                                minutes=2.0)) == 0
        out = tmp_path / "transfer"
        code = main(["transfer", "--run", str(run3),
                     "--data", str(data18 / "manifest.json"),
                     "--out", str(out)])
        assert code == 0
        assert "hashes unchanged" in capsys.readouterr().out
        assert (out / "report.csv").exists()

    def test_montage_fixed_model_refused(self, cohort3, tmp_path, capsys):
        run = tmp_path / "tcnrun"
        code = main(["train", "--data", str(cohort3 / "manifest.json"),
                     "--arch", "tcn", "--folds", "3", "--seed", "1",
                     "--epochs", "1", "--dtype", "float32", "--out", str(run)])
        assert code == 0
        code = main(["transfer", "--run", str(run),
                     "--data", str(cohort3 / "manifest.json"),
                     "--out", str(tmp_path / "t")])
        assert code == 1
        assert "not transferable" in capsys.readouterr().err


class TestEnsemble:
    def test_bundle_and_weights(self, cohort3, tmp_path, capsys):
        out = tmp_path / "ens"
        cfg = tmp_path / "ens.json"
        cfg.write_text(json.dumps({"model_config": TINY_MODEL_CFG}))
        code = main(["ensemble", "--data", str(cohort3 / "manifest.json"),
                     "--members", "statenet:1,statenet:2", "--folds", "3",
                     "--fold", "0", "--seed", "4", "--epochs", "1",
                     "--gate-epochs", "1", "--gate-hidden", "4",
                     "--dtype", "float32", "--config", str(cfg),
                     "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "bundle" / "bundle.json").read_text())
        assert manifest["k"] == 2
        weights = (out / "weights_by_neonate.csv").read_text().splitlines()
        assert weights[0] == "neonate,statenet:1,statenet:2"
        assert weights[-1].startswith("all,")
        assert (out / "report.csv").exists()


class TestOcclude:
    def test_occlusion_artifacts(self, run3, cohort3, tmp_path, capsys):
        out = tmp_path / "occ"
        ckpt = run3 / "fold_0" / "best.ckpt"
        code = main(["occlude", "--ckpt", str(ckpt),
                     "--data", str(cohort3 / "manifest.json"),
                     "--recording", "rec00", "--window-index", "1",
                     "--occ-len-s", "2.0", "--stride-s", "2.0",
                     "--out", str(out)])
        assert code == 0
        assert (out / "occlusion.csv").exists()
        payload = json.loads((out / "occlusion.json").read_text())
        assert "argmax_region" in payload
        assert "strongest region" in capsys.readouterr().out

    def test_bad_recording_id(self, run3, cohort3, tmp_path):
        with pytest.raises(SystemExit):
            main(["occlude", "--ckpt", str(run3 / "fold_0" / "best.ckpt"),
                  "--data", str(cohort3 / "manifest.json"),
                  "--recording", "nope", "--out", str(tmp_path / "x")])

    def test_plot_writes_image(self, run3, cohort3, tmp_path):
        pytest.importorskip("matplotlib")
        out = tmp_path / "occplot"
        code = main(["occlude", "--ckpt", str(run3 / "fold_0" / "best.ckpt"),
                     "--data", str(cohort3 / "manifest.json"),
                     "--recording", "rec00", "--window-index", "0",
                     "--occ-len-s", "5.0", "--stride-s", "5.0",
                     "--mode", "channel-temporal", "--plot", "--out", str(out)])
        assert code == 0
        assert (out / "occlusion.png").stat().st_size > 0


class TestParallelFolds:
    def test_jobs_flag_trains_all_folds(self, cohort3, tmp_path):
        out = tmp_path / "parallel"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model_config": TINY_MODEL_CFG}))
        code = main(["train", "--data", str(cohort3 / "manifest.json"),
                     "--arch", "statenet", "--folds", "3", "--seed", "2",
                     "--epochs", "1", "--dtype", "float32", "--jobs", "2",
                     "--config", str(cfg), "--out", str(out)])
        assert code == 0
        for fold in range(3):
            assert (out / f"fold_{fold}" / "best.ckpt").exists()

    def test_jobs_matches_sequential(self, cohort3, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model_config": TINY_MODEL_CFG}))
        args = ["train", "--data", str(cohort3 / "manifest.json"),
                "--arch", "statenet", "--folds", "2", "--seed", "3",
                "--epochs", "1", "--dtype", "float64", "--config", str(cfg)]
        seq, par = tmp_path / "seq", tmp_path / "par"
        assert main(args + ["--out", str(seq)]) == 0
        assert main(args + ["--out", str(par), "--jobs", "2"]) == 0
        for fold in range(2):
            assert (seq / f"fold_{fold}" / "best.ckpt").read_bytes() == \
                (par / f"fold_{fold}" / "best.ckpt").read_bytes()
