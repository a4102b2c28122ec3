import json

import numpy as np
import pytest

from tipatch.cli import main
from tipatch.evalkit import save_dataset, synth_dataset
from tipatch.imagery import Patch, load_image, load_patch, save_patch


@pytest.fixture(scope="module")
def dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_dataset(synth_dataset(6, 48, 48, 1), root / "train")
    save_dataset(synth_dataset(4, 48, 48, 2), root / "val")
    save_patch(Patch(np.random.default_rng(0).uniform(size=(3, 12, 12)), {"variant": "Baseline"}),
               root / "p.tipf")
    return root


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0


def test_unknown_flag_exit_1():
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1


@pytest.mark.parametrize("metric", ["proxy", "tinycnn"])
def test_gradcheck_ok(metric, capsys):
    assert main(["gradcheck", "--metric", metric]) == 0
    out = _json(capsys)
    assert out["ok"] and out["max_rel_error"] <= 1e-4


def test_gradcheck_failure_exit_2(capsys):
    assert main(["gradcheck", "--metric", "proxy", "--tol", "1e-12"]) == 2
    assert not _json(capsys)["ok"]


def test_synth_twice_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["synth", "-n", "3", "-H", "32", "-W", "40", "--seed", "4",
                     "-o", str(tmp_path / d)]) == 0
    for name in ("00000.ppm", "00001.ppm", "00002.ppm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert b"seed=4" in (tmp_path / "a" / "00000.ppm").read_bytes()[:200]


def test_train_zero_iterations(dirs, tmp_path, capsys):
    out = tmp_path / "z.tipf"
    assert main(["train", "--data", str(dirs / "train"), "--iters", "0", "--patch-size", "8",
                 "--batch-size", "2", "-o", str(out)]) == 0
    p = load_patch(out)
    assert p.size == 8
    assert p.meta["seed"] == 0 and "config_hash" in p.meta and "tool_version" in p.meta
    assert _json(capsys)["best_iteration"] == 0


def test_train_eval_report(dirs, tmp_path, capsys):
    patch = tmp_path / "b.tipf"
    assert main(["train", "--data", str(dirs / "train"), "--val", str(dirs / "val"),
                 "--variant", "baseline-l+", "--iters", "6", "--patch-size", "10",
                 "--batch-size", "3", "-o", str(patch)]) == 0
    res = _json(capsys)
    assert (tmp_path / "b.tipf.log.png").exists()
    log = (tmp_path / "b.tipf.log.csv").read_text()
    assert log.startswith("# tipatch ")
    assert load_patch(patch).meta["variant"] == "BaselineL+"
    assert res["best_val_gain"] is not None

    rep = tmp_path / "r.json"
    assert main(["eval", "--patch", str(patch), "--data", str(dirs / "val"), "-o", str(rep)]) == 0
    assert _json(capsys)["n"] == 4
    doc = json.loads(rep.read_text())
    assert doc["protocol"]["rotation"] is True
    assert doc["meta"]["config_hash"]

    out = tmp_path / "rep"
    assert main(["report", str(rep), "--logs", str(tmp_path / "b.tipf.log.csv"),
                 "-o", str(out)]) == 0
    assert capsys.readouterr().out.startswith("variant,")
    assert (out / "comparison.png").stat().st_size > 0
    assert (out / "b.log.png").exists()
    assert json.loads((out / "comparison.json").read_text())["rows"] == ["BaselineL+"]


def test_eval_tiled_with_pipeline(dirs, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"camsim": {"stages": [{"type": "noise", "sigma": 0.01}]},
                               "eval": {"protocol": "tiled", "tile_region": "0,0,24,24"}}))
    rep = tmp_path / "r.json"
    assert main(["eval", "--config", str(cfg), "--patch", str(dirs / "p.tipf"),
                 "--data", str(dirs / "val"), "-o", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert doc["footprint"] == pytest.approx(0.25)
    assert doc["protocol"]["pipeline"] == [{"type": "noise", "sigma": 0.01}]


def test_unknown_variant_exit_1(dirs, tmp_path):
    assert main(["train", "--data", str(dirs / "train"), "--variant", "nope",
                 "-o", str(tmp_path / "x.tipf")]) == 1


def test_bad_config_key_exit_1(dirs, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"iters": 3}}')
    assert main(["train", "--config", str(cfg), "--data", str(dirs / "train"),
                 "-o", str(tmp_path / "x.tipf")]) == 1


def test_bad_image_exit_2(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "a.ppm").write_bytes(b"P5\n2 2\n255\n0000")
    assert main(["train", "--data", str(tmp_path / "d"), "-o", str(tmp_path / "x.tipf")]) == 2
    assert main(["apply", "--image", str(tmp_path / "missing.ppm"), "--patch", "x",
                 "-o", str(tmp_path / "o.ppm")]) == 2


def test_apply_and_tile(dirs, tmp_path):
    img = dirs / "val" / "00000.ppm"
    out = tmp_path / "a.ppm"
    assert main(["apply", "--image", str(img), "--patch", str(dirs / "p.tipf"),
                 "--x", "5", "--y", "7", "--rot", "90", "-o", str(out)]) == 0
    a = load_image(out)
    p = load_patch(dirs / "p.tipf").pixels
    assert np.abs(a[:, 7:19, 5:17] - np.rot90(p, 1, axes=(1, 2))).max() <= 0.5 / 255 + 1e-12

    out = tmp_path / "t.ppm"
    assert main(["tile", "--image", str(img), "--patch", str(dirs / "p.tipf"),
                 "--gap", "2", "-o", str(out)]) == 0
    t = load_image(out)
    assert np.abs(t[:, 14:26, 14:26] - p).max() <= 0.5 / 255 + 1e-12
    assert main(["tile", "--image", str(img), "--patch", str(dirs / "p.tipf"),
                 "--region", "1,2,3", "-o", str(out)]) == 1


def test_simulate(dirs, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"camsim": {"stages": [{"type": "blur", "passes": 1}]}}))
    fig = tmp_path / "d.png"
    assert main(["simulate", "--image", str(dirs / "val" / "00001.ppm"), "--pipeline", str(cfg),
                 "--patch", str(dirs / "p.tipf"), "--figure", str(fig),
                 "-o", str(tmp_path / "s.ppm")]) == 0
    res = _json(capsys)
    assert set(res["distance_curve"]) == {"near", "mid", "far"}
    assert res["wallpaper_gain"] == res["distance_curve"]["near"]
    assert fig.stat().st_size > 0


@pytest.mark.slow
def test_train_all(dirs, tmp_path, capsys):
    out = tmp_path / "all"
    assert main(["train-all", "--data", str(dirs / "train"), "--val", str(dirs / "val"),
                 "--test", f"t={dirs / 'val'}", "--iters", "2", "--patch-size", "8",
                 "--batch-size", "4", "-o", str(out)]) == 0
    csv_out = capsys.readouterr().out.splitlines()
    assert csv_out[0] == "variant,val,t"
    assert len(csv_out) == 9
    assert len(list(out.glob("*.tipf"))) == 8
    assert (out / "comparison.png").exists() and (out / "patches.png").exists()
