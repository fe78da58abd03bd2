import json

import numpy as np
import pytest

from lumisplit.cli import main
from lumisplit.pipeline import FitConfig

TINY = dict(iter0=2, iter1=30, iter2=5, iter3=3, image_size=32, texture_size=32)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(FitConfig(**TINY).to_text())
    assert main(["gen", "--seed", "1", "--regions", "2", "--occluder", "shadow", "--image-size", "32",
                 "--texture-size", "32", "--out", str(root / "scene")]) == 0
    assert main(["fit", "--scene", str(root / "scene"), "--config", str(root / "tiny.cfg"),
                 "--out", str(root / "fit")]) == 0
    return root


def test_fit_outputs(workspace):
    fit = workspace / "fit"
    for name in ("config.txt", "log.csv", "texture_diffuse.png", "texture.flr", "lights.json", "ace.json",
                 "metrics.json", "state.npz", "figures/losses.png", "figures/ace_areas.png",
                 "figures/masks_000.png", "masks/m_o_000.flr", "renders/i_out_000.png"):
        assert (fit / name).exists(), name
    header = (fit / "log.csv").read_text().splitlines()[0]
    assert header == "iteration,stage,l_lan,l_pho,l_seg,l_area,l_bin,l_gp,l_lp,l_hp,total"


def test_reload_matches_hash(workspace):
    from lumisplit.report import load_fit
    res = load_fit(workspace / "fit")
    assert res.hash() == json.loads((workspace / "fit" / "metrics.json").read_text())["fit_hash"]


def test_eval(workspace, capsys):
    out = workspace / "eval.json"
    assert main(["eval", "--pred", str(workspace / "fit"), "--gt", str(workspace / "scene"), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    for key in ("psnr_db", "ssim", "mask_iou", "texture_rmse_visible", "n_l", "runtime_seconds"):
        assert key in d


def test_relight_and_swap(workspace):
    res_lights = json.loads((workspace / "fit" / "lights.json").read_text())
    assert main(["relight", "--fit", str(workspace / "fit"), "--lights", str(workspace / "fit" / "lights.json"),
                 "--out", str(workspace / "relit.png")]) == 0
    assert (workspace / "relit.png").exists() and res_lights
    assert main(["swap-eval", "--fit-src", str(workspace / "fit"), "--fit-tgt", str(workspace / "fit"),
                 "--out", str(workspace / "swap")]) == 0
    assert json.loads((workspace / "swap" / "metrics.json").read_text())["psnr_db"] > 0


def test_missing_config_key(workspace, capsys):
    text = "".join(l + "\n" for l in FitConfig(**TINY).to_text().splitlines() if not l.startswith("w3 "))
    (workspace / "bad.cfg").write_text(text)
    code = main(["fit", "--scene", str(workspace / "scene"), "--config", str(workspace / "bad.cfg"),
                 "--out", str(workspace / "nofit")])
    assert code == 1
    assert "missing config key: w3" in capsys.readouterr().err


def test_usage_and_io_errors(workspace):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["gen", "--regions", "2", "--out", str(workspace / "x")]) == 1
    assert main(["fit", "--scene", str(workspace / "nope"), "--out", str(workspace / "y")]) == 2
    assert main(["eval", "--pred", str(workspace / "nope"), "--gt", str(workspace / "scene")]) == 2


def test_thread_env(workspace, monkeypatch):
    monkeypatch.setenv("LUMISPLIT_THREADS", "-1")
    assert main(["gen", "--out", str(workspace / "t")]) == 1


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    assert "FAIL" not in capsys.readouterr().out
