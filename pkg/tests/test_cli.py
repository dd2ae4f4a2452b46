import json

import numpy as np
import pytest

from atlasseg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from atlasseg.volume import read_mvol


def run(*argv):
    return main(list(argv))


def test_phantom_gen(tmp_path, capsys):
    code = run("phantom", "gen", "--ga", "27.5", "--seed", "3",
               "--size", "32", "--out", str(tmp_path), "--name", "demo")
    assert code == EXIT_OK
    out = capsys.readouterr().out.strip()
    assert out.endswith("demo_image.mvol")
    img = read_mvol(tmp_path / "demo_image.mvol")
    lab = read_mvol(tmp_path / "demo_labels.mvol")
    assert img.dims == lab.dims == (32, 32, 32)


def test_phantom_gen_bad_ga(tmp_path, capsys):
    code = run("phantom", "gen", "--ga", "12.0", "--out", str(tmp_path))
    assert code == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        run("phantom", "gen", "--ga", "not-a-number", "--out", "x")
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("no-such-verb")
    assert exc.value.code == EXIT_USAGE


def test_atlas_gen_range(tmp_path):
    code = run("atlas", "gen", "--size", "32", "--weeks", "30:31",
               "--out", str(tmp_path / "atlas"))
    assert code == EXIT_OK
    for week in (30, 31):
        assert (tmp_path / "atlas" / f"atlas_{week}_image.mvol").exists()
        assert (tmp_path / "atlas" / f"atlas_{week}_labels.mvol").exists()


def test_perturb_roundtrip(tmp_path):
    run("phantom", "gen", "--ga", "30.0", "--size", "32",
        "--out", str(tmp_path), "--name", "s")
    src = tmp_path / "s_image.mvol"
    dst = tmp_path / "s_gamma.mvol"
    code = run("perturb", "--kind", "gamma", "--value", "0.7",
               "--in", str(src), "--out", str(dst))
    assert code == EXIT_OK
    out = read_mvol(dst)
    assert out.data.max() == 1.0
    assert not np.array_equal(out.data, read_mvol(src).data)


def test_perturb_rejects_label_input(tmp_path, capsys):
    run("phantom", "gen", "--ga", "30.0", "--size", "32",
        "--out", str(tmp_path), "--name", "s")
    code = run("perturb", "--kind", "gamma", "--value", "0.7",
               "--in", str(tmp_path / "s_labels.mvol"),
               "--out", str(tmp_path / "x.mvol"))
    assert code == EXIT_DATA
    assert "label" in capsys.readouterr().err


def test_train_missing_config(tmp_path, capsys):
    code = run("train", "--config", str(tmp_path / "nope.json"),
               "--manifest", str(tmp_path / "m.json"),
               "--atlas-dir", str(tmp_path), "--out", str(tmp_path / "run"))
    assert code == EXIT_DATA


def test_train_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"patch_edge": -5}))
    code = run("train", "--config", str(cfg),
               "--manifest", str(tmp_path / "m.json"),
               "--atlas-dir", str(tmp_path), "--out", str(tmp_path / "run"))
    assert code == EXIT_DATA


def test_report_missing_dir(tmp_path, capsys):
    code = run("report", "--in", str(tmp_path / "absent"))
    assert code == EXIT_DATA


def test_eval_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "weights.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    code = run("eval", "--checkpoint", str(bad),
               "--manifest", str(tmp_path / "m.json"),
               "--atlas-dir", str(tmp_path), "--out", str(tmp_path / "res"))
    assert code == EXIT_DATA
