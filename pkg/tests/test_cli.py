import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from rankseg.cli import main
from rankseg.config import load_config, load_config_file, override
from rankseg.errors import ConfigError
from rankseg.segnet import SegNet, SegNetConfig, save_checkpoint
from rankseg.synthshift import read_array, read_manifest

TINY = """
[run]
seed = 3

[scene]
height = 48
width = 48
min_pixels = 4

[benchmark]
n_source = 4
n_target = 3

[perturb]
n_perturb = 3

[evolve]
n_phases = 2
iters_per_phase = 3
batch_size = 2
widths = 4, 6, 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def test_config_defaults_and_seed_override():
    cfg = load_config(None)
    assert cfg.perturb.n_perturb == 10 and cfg.perturb.sigma == 0.35 and cfg.perturb.n_grades == 5
    assert cfg.loss.alpha == 0.5 and cfg.evolve.n_phases == 3 and cfg.evolve.lr == 1e-3
    cfg = load_config("[run]\nseed = 4\n[scene]\nseed = 9\n")
    assert cfg.scene.seed == 9 and cfg.evolve.seed == 4
    cfg = load_config("[run]\nseed = 4\n[scene]\nseed = 9\n", seed=11)
    assert cfg.scene.seed == cfg.shift.seed == cfg.evolve.seed == 11


def test_config_rejects_unknown_keys():
    for text in ("[perturb]\nsigmaa = 0.3\n", "[nope]\nx = 1\n", "[run]\nverbose = 1\n", "[evolve]\ndump_dir = x\n"):
        with pytest.raises(ConfigError):
            load_config(text)
    with pytest.raises(ConfigError):
        load_config("[perturb]\nsigma = abc\n")
    with pytest.raises(ConfigError):
        load_config("[perturb]\nsigma = -1\n")


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = override(load_config(TINY), alpha=0.0, sigma=0.1, n_perturb=4, grades=6, train_phases=5,
                   infer_iters=2, stop_grad_perturbed=True, threads=1)
    (tmp_path / "c.ini").write_text(cfg.to_ini())
    again = load_config_file(tmp_path / "c.ini")
    assert again == cfg
    assert again.loss.alpha == 0.0 and again.perturb.n_grades == 6 and again.evolve.infer_iters == 2
    assert again.loss.stop_grad_perturbed and again.threads == 1


def test_gen_data_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    files = sorted(p.relative_to(root / "data") for p in (root / "data").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (root / "data" / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
    assert len(read_manifest(root / "data" / "manifest.csv")) == 7


def test_gen_data_unwritable(workspace, tmp_path, capsys):
    _, cfg = workspace
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--config", str(cfg), "--out", str(blocker / "sub")]) == 2
    assert str(blocker) in capsys.readouterr().err


def test_evolve_outputs(workspace):
    root, cfg = workspace
    out = root / "run"
    assert main(["evolve", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out), "--alpha", "0"]) == 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert len(rows) == 3
    assert (out / "checkpoints" / "phase1.ckpt").exists() and (out / "checkpoints" / "phase2.ckpt").exists()
    assert (out / "dice.svg").read_text().startswith("<svg")
    assert "alpha = 0.0" in (out / "effective_config.ini").read_text()


def test_infer_eval_probe(workspace, capsys):
    root, cfg = workspace
    ckpt = root / "ckpt.ckpt"
    save_checkpoint(SegNet(SegNetConfig(3, (4, 6, 8), seed=1)), None, 1, ckpt)
    manifest = root / "data" / "manifest.csv"
    args = ["--config", str(cfg), "--checkpoint", str(ckpt), "--manifest", str(manifest)]
    assert main(["infer", *args, "--out", str(root / "inf1")]) == 0
    assert main(["infer", *args, "--out", str(root / "inf2")]) == 0
    preds = sorted((root / "inf1" / "predictions").iterdir())
    assert len(preds) == 7
    for p in preds:
        assert p.read_bytes() == (root / "inf2" / "predictions" / p.name).read_bytes()
        assert read_array(p).max() <= 3

    assert main(["eval", "--config", str(cfg), "--pred", str(root / "inf1" / "predictions"),
                 "--manifest", str(manifest), "--out", str(root / "ev")]) == 0
    assert "dice" in capsys.readouterr().out
    assert (root / "ev" / "report.csv").exists()

    assert main(["probe-rank", *args, "--out", str(root / "pr"), "--sigma", "0"]) == 0
    rows = list(csv.DictReader(open(root / "pr" / "rank_probe.csv")))
    assert len(rows) == 7 * 3
    assert all(float(r["spearman"]) == 1.0 for r in rows)


def test_infer_single_iteration_is_direct_argmax(workspace):
    from rankseg.evolve import predict
    from rankseg.hints import null_hints

    root, cfg = workspace
    net = SegNet(SegNetConfig(3, (4, 6, 8), seed=2))
    save_checkpoint(net, None, 1, root / "n2.ckpt")
    assert main(["infer", "--config", str(cfg), "--checkpoint", str(root / "n2.ckpt"), "--manifest",
                 str(root / "data" / "manifest.csv"), "--out", str(root / "inf_k1"), "--infer-iters", "1"]) == 0
    for e in read_manifest(root / "data" / "manifest.csv"):
        img = read_array(root / "data" / "images" / e.filename)
        direct = predict(net, img, null_hints(3, 48, 48)).argmax(axis=1)[0]
        np.testing.assert_array_equal(read_array(root / "inf_k1" / "predictions" / e.filename), direct)


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    manifest = str(root / "data" / "manifest.csv")
    with pytest.raises(SystemExit) as exc:
        main(["evolve", "--bogus"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[perturb]\nsigmaa = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1

    assert main(["eval", "--config", str(cfg), "--pred", str(tmp_path / "none"), "--manifest", manifest]) == 5
    assert "target_0006.bin" in capsys.readouterr().err

    wrong = tmp_path / "wrong.ckpt"
    save_checkpoint(SegNet(SegNetConfig(2, (4, 6, 8))), None, 1, wrong)
    assert main(["infer", "--config", str(cfg), "--checkpoint", str(wrong), "--manifest", manifest,
                 "--out", str(tmp_path / "y")]) == 4
    ok = tmp_path / "ok.ckpt"
    save_checkpoint(SegNet(SegNetConfig(3, (4, 6, 8))), None, 1, ok)
    assert main(["infer", "--checkpoint", str(ok), "--manifest", manifest, "--out", str(tmp_path / "z")]) == 4
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(ok.read_bytes()[:200])
    assert main(["infer", "--config", str(cfg), "--checkpoint", str(corrupt), "--manifest", manifest,
                 "--out", str(tmp_path / "w")]) == 4


def test_numeric_abort_exit_code(workspace, tmp_path, monkeypatch):
    import rankseg.evolve as evolve

    root, cfg = workspace
    real = evolve.total_loss
    monkeypatch.setattr(evolve, "total_loss", lambda d, s, a: real(d, s, a) * float("nan"))
    out = tmp_path / "nan"
    assert main(["evolve", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 3
    assert list(out.glob("nan_batch_*.npz"))


def test_console_entry_point(workspace):
    root, cfg = workspace
    env = dict(os.environ, CRISP_LOG="debug")
    proc = subprocess.run([sys.executable, "-m", "rankseg", "gen-data", "--config", str(cfg), "--out",
                           str(root / "sub")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "DEBUG" in proc.stderr or "INFO" in proc.stderr
