import filecmp
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from twoview import metricnet
from twoview.cli import main
from twoview.dataset import write_image


def run(*argv):
    return main([str(a) for a in argv])


def _tree_identical(a: Path, b: Path):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only and not cmp.diff_files
    for sub in cmp.common_dirs:
        _tree_identical(a / sub, b / sub)
    for f in cmp.common_files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


SMALL = ["--genera", 2, "--species-per-genus", 2, "--samples", 6, "--test-per-species", 2,
         "--image-size", 96]


def test_synth_deterministic(tmp_path):
    assert run("synth", "--seed", 7, "--out", tmp_path / "a", *SMALL) == 0
    assert run("synth", "--seed", 7, "--out", tmp_path / "b", *SMALL) == 0
    _tree_identical(tmp_path / "a", tmp_path / "b")
    assert (tmp_path / "a" / "taxonomy.csv").is_file()


def test_full_pipeline(tmp_path, capsys):
    d = tmp_path / "data"
    assert run("synth", "--out", d, *SMALL) == 0
    assert run("preprocess", "--root", d / "images", "--out", tmp_path / "views") == 0
    assert (tmp_path / "views" / "G00S00_000.global.png").is_file()
    assert (tmp_path / "views" / "G00S00_000.local.png").is_file()
    assert run("make-pairs", "--data", d, "--stage", "genus", "--positive", 20, "--negative", 30,
               "--out", tmp_path / "pairs") == 0
    assert run("make-pairs", "--data", d, "--stage", "species", "--positive", 10, "--negative", 15,
               "--out", tmp_path / "pairs") == 0
    for stage in ("genus", "species"):
        assert run("train", "--data", d, "--stage", stage, "--pairs", tmp_path / "pairs" / f"pairs_{stage}.csv",
                   "--epochs", 1, "--learning-rate", 0.05, "--out", tmp_path / "models") == 0
    assert (tmp_path / "models" / "model_a_loss.csv").read_text().startswith("epoch,mean_loss\n")
    ma, mb = tmp_path / "models" / "model_a.scnn", tmp_path / "models" / "model_b.scnn"
    assert run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--n-r", 2,
               "--out", tmp_path / "refs") == 0
    assert run("evaluate", "--data", d, "--model-a", ma, "--model-b", mb, "--refs", tmp_path / "refs",
               "--k", 4, "--out", tmp_path / "eval") == 0
    report = json.loads((tmp_path / "eval" / "evaluate.json").read_text())
    assert {"acc_top1", "acc_top3", "acc_top5", "s_metric"} <= set(report["metrics"])
    capsys.readouterr()
    assert run("classify", "--input", d / "images" / "G01S01", "--model-a", ma, "--model-b", mb,
               "--refs", tmp_path / "refs", "--top-n", 2, "--diagnostics", "--json", "--workers", 2) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out) == 6 and all(len(r["ranking"]) <= 2 and "r_k" in r for r in out)
    # wrong model for this reference set
    assert run("classify", "--input", d / "images" / "G01S01", "--model-a", mb, "--model-b", mb,
               "--refs", tmp_path / "refs") == 5


def _zero_noise_setup(tmp_path):
    d = tmp_path / "data"
    run("synth", "--out", d, "--genera", 2, "--species-per-genus", 2, "--samples", 4,
        "--test-per-species", 1, "--image-size", 96, "--shape-noise", 0, "--texture-noise", 0)
    a = metricnet.SiameseModel((224, 224, 3), "global", "genus", "toy2", seed=1)
    b = metricnet.SiameseModel((64, 64, 3), "local", "species", "toy2", seed=2)
    metricnet.save(a, tmp_path / "a.scnn")
    metricnet.save(b, tmp_path / "b.scnn")
    return d, tmp_path / "a.scnn", tmp_path / "b.scnn"


def test_evaluate_perfect_upper_bound(tmp_path, capsys):
    # zero noise: every test image equals its species' references, so self-match wins
    d, ma, mb = _zero_noise_setup(tmp_path)
    assert run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--n-r", 2, "--out", tmp_path / "r") == 0
    capsys.readouterr()
    assert run("evaluate", "--data", d, "--model-a", ma, "--model-b", mb, "--refs", tmp_path / "r",
               "--k", 2, "--top-k", "1,3,5", "--out", tmp_path / "e", "--json") == 0
    m = json.loads(capsys.readouterr().out)["metrics"]
    assert (m["acc_top1"], m["acc_top3"], m["acc_top5"]) == (1.0, 1.0, 1.0)


def test_add_species_cli(tmp_path):
    d, ma, mb = _zero_noise_setup(tmp_path)
    run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--n-r", 2, "--out", tmp_path / "r")
    run("synth", "--out", tmp_path / "new", "--genera", 1, "--samples", 3, "--test-per-species", 1,
        "--image-size", 96, "--first-genus", 5)
    before = (metricnet.file_fingerprint(ma), metricnet.file_fingerprint(mb))
    assert run("add-species", "--refs", tmp_path / "r", "--root", tmp_path / "new" / "images",
               "--taxonomy", tmp_path / "new" / "taxonomy.csv", "--model-a", ma, "--model-b", mb,
               "--out", tmp_path / "r2") == 0
    assert before == (metricnet.file_fingerprint(ma), metricnet.file_fingerprint(mb))
    m = json.loads((tmp_path / "r2" / "references.json").read_text())
    assert len({e["species_id"] for e in m["entries"]}) == 7
    assert run("add-species", "--refs", tmp_path / "r2", "--root", tmp_path / "new" / "images",
               "--taxonomy", tmp_path / "new" / "taxonomy.csv", "--model-a", ma, "--model-b", mb,
               "--out", tmp_path / "r3") == 4


def test_config_env_flag_precedence(tmp_path, monkeypatch, capsys):
    d, ma, mb = _zero_noise_setup(tmp_path)
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# settings\nn_r = 1\n")
    run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--config", cfg, "--out", tmp_path / "r")
    assert json.loads((tmp_path / "r" / "references.json").read_text())["n_r"] == 1
    monkeypatch.setenv("TWOVIEW_N_R", "3")
    run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--config", cfg, "--out", tmp_path / "r")
    assert json.loads((tmp_path / "r" / "references.json").read_text())["n_r"] == 3
    run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--config", cfg, "--n-r", 2,
        "--out", tmp_path / "r")
    assert json.loads((tmp_path / "r" / "references.json").read_text())["n_r"] == 2


def test_section_keys(tmp_path):
    from types import SimpleNamespace
    from twoview.cli import Settings
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 3\nstage_b.epochs = 7\n")
    args = SimpleNamespace(config=str(cfg), epochs=None)
    assert Settings(args, "stage_a").get("epochs") == 3
    assert Settings(args, "stage_b").get("epochs") == 7
    assert Settings(SimpleNamespace(config=None, epochs=None)).get("epochs") == 20


def test_exit_codes(tmp_path, capsys):
    d, ma, mb = _zero_noise_setup(tmp_path)
    assert run("classify", "--input", tmp_path / "none.png", "--model-a", ma, "--model-b", mb,
               "--refs", tmp_path / "missing") == 3
    bad = tmp_path / "bad.scnn"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert run("build-refs", "--data", d, "--model-a", bad, "--model-b", mb, "--out", tmp_path / "r") == 4
    run("build-refs", "--data", d, "--model-a", ma, "--model-b", mb, "--out", tmp_path / "r", "--n-r", 1)
    blank = tmp_path / "blank.png"
    write_image(np.full((40, 40, 3), 255, np.uint8), blank)
    assert run("classify", "--input", blank, "--model-a", ma, "--model-b", mb, "--refs", tmp_path / "r") == 6
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("twoview classify: no-leaf-detected")
    with pytest.raises(SystemExit) as exc:
        run("classify", "--bogus")
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "twoview", "classify", "--input", str(tmp_path / "x.png"),
                        "--model-a", "a", "--model-b", "b", "--refs", "r"], capture_output=True, text=True)
    assert r.returncode == 3 and len(r.stderr.strip().splitlines()) == 1
