import csv
import json
import math
import subprocess
import sys
import threading

import numpy as np
import pytest
from PIL import Image

from gainfuse.cli import main, resolve_config
from gainfuse.io import ConfigError, load_image, serve_requests

FAST = ["--steps", "10", "--dig-interval", "3", "--patch-grid", "4x4"]


@pytest.fixture
def images(tmp_path):
    r = np.random.default_rng(0)
    paths = {}
    paths["gray"] = tmp_path / "ir.png"
    Image.fromarray((r.random((16, 16)) * 255).astype(np.uint8)).save(paths["gray"])
    paths["rgb"] = tmp_path / "vis.png"
    Image.fromarray((r.random((16, 16, 3)) * 255).astype(np.uint8)).save(paths["rgb"])
    paths["gray2"] = tmp_path / "b.pgm"
    Image.fromarray((r.random((16, 16)) * 255).astype(np.uint8)).save(paths["gray2"])
    paths["small"] = tmp_path / "small.png"
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(paths["small"])
    return {k: str(v) for k, v in paths.items()}


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_fuse_outputs(tmp_path, images):
    out = tmp_path / "run"
    assert main(["fuse", "--ir", images["gray"], "--vis", images["rgb"], "--out", str(out), *FAST]) == 0
    for name in ("fused.png", "trace.csv", "config.txt", "manifest.json", "dig_trace.png", "report.csv"):
        assert (out / name).is_file(), name
    assert load_image(out / "fused.png").shape == (16, 16, 3)
    manifest = json.loads((out / "manifest.json").read_text())
    for key in ("seed", "versions", "wall_time_s", "inputs", "config", "argv"):
        assert key in manifest
    assert len(manifest["inputs"]) == 2
    assert (out / "trace.csv").read_text().startswith("# schema: dig-trace v1")
    trace = rows(out / "trace.csv")
    assert len({r["t"] for r in trace}) == math.ceil(10 / 3)


def test_flags_override_config(tmp_path, images):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps = 12\ndig_interval = 4\npatch_grid = 2x2\nseed = 5\n")
    out = tmp_path / "o"
    assert main(["fuse", "--config", str(cfg), "--inputs", images["gray"], images["gray2"], "--steps", "8",
                 "--out", str(out)]) == 0
    echoed = dict(line.split(" = ", 1) for line in (out / "config.txt").read_text().splitlines())
    assert echoed["steps"] == "8" and echoed["dig_interval"] == "4" and echoed["seed"] == "5"


def test_config_echo_reruns_identically(tmp_path, images):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["fuse", "--inputs", images["gray"], images["gray2"], "--out", str(a), *FAST, "--seed", "9"])
    assert main(["fuse", "--config", str(a / "config.txt"), "--out", str(b)]) == 0
    assert (a / "fused.png").read_bytes() == (b / "fused.png").read_bytes()


def test_duplicated_input_equals_single(tmp_path, images):
    one, two = tmp_path / "one", tmp_path / "two"
    main(["fuse", "--inputs", images["gray"], "--out", str(one), *FAST])
    main(["fuse", "--inputs", images["gray"], images["gray"], "--out", str(two), *FAST])
    assert (one / "fused.png").read_bytes() == (two / "fused.png").read_bytes()


def test_weight_modes_and_oracles(tmp_path, images):
    base = ["fuse", "--inputs", images["gray"], images["gray2"], *FAST, "--no-metrics"]
    for i, extra in enumerate((["--weight-mode", "static-equal"], ["--weight-mode", "static-fixed=0.25,0.75"],
                               ["--patch-grid", "global", "--oracle", "gaussian"],
                               ["--oracle", "empirical", "--dig-distance", "ssim", "--independent-noise"],
                               ["--spacing", "coarse_to_fine", "--auto-scale", "--temperature", "2"])):
        assert main([*base, "--out", str(tmp_path / f"m{i}"), *extra]) == 0, extra


def test_dig_trace_synthetic(tmp_path):
    out = tmp_path / "d"
    assert main(["dig-trace", "--synthetic", "masked_complement", "--steps", "25", "--dig-interval", "10",
                 "--patch-grid", "4x4", "--seeds-for-bands", "3", "--out", str(out)]) == 0
    text = (out / "dig_curves.csv").read_text()
    assert text.startswith("# schema: dig-curves v1")
    data = rows(out / "dig_curves.csv")
    for name in ("a", "b"):
        assert len({r["t"] for r in data if r["modality"] == name}) == math.ceil(25 / 10)
    assert (out / "dig_curves.png").is_file()


def test_dig_trace_inputs(tmp_path, images):
    out = tmp_path / "d"
    assert main(["dig-trace", "--ir", images["gray"], "--vis", images["gray2"], *FAST, "--seeds-for-bands", "2",
                 "--out", str(out)]) == 0
    assert {r["modality"] for r in rows(out / "dig_curves.csv")} == {"ir", "vis"}


def test_metrics_command(tmp_path, images, capsys):
    out = tmp_path / "m"
    assert main(["metrics", "--fused", images["gray"], "--ir", images["gray"], "--vis", images["gray2"],
                 "--out", str(out)]) == 0
    report = rows(out / "report.csv")[0]
    assert report["MSE"] != "n/a" and report["Nabf"] == "n/a"
    assert "PSNR" in capsys.readouterr().out


def test_validate_theory_failure_exit(tmp_path):
    # four instances cannot reach significance in the sign test
    out = tmp_path / "v"
    code = main(["validate-theory", "--instances", "4", "--random-policies", "2", "--permutations", "99",
                 "--out", str(out)])
    assert code == 5
    summary = (out / "summary.txt").read_text()
    assert "dynamic-vs-static: FAIL" in summary
    for name in ("ledger.csv", "covariance.csv", "policies.csv", "mechanism.png"):
        assert (out / name).is_file()


@pytest.mark.parametrize("argv", [
    ["fuse", "--steps", "10"],
    ["fuse", "--ir", "x.png", "--steps", "1"],
    ["fuse", "--ir", "x.png", "--patch-grid", "4by4"],
    ["fuse", "--ir", "x.png", "--weight-mode", "sometimes"],
    ["fuse", "--ir", "x.png", "--oracle", "magic"],
    ["fuse", "--bogus-flag"],
])
def test_config_errors(tmp_path, images, argv):
    argv = [images["gray"] if a == "x.png" else a for a in argv]
    assert main([*argv, "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key(tmp_path, images):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stepz = 3\n")
    assert main(["fuse", "--config", str(cfg), "--ir", images["gray"], "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError):
        resolve_config({"steps": "many"}, {})


def test_input_errors(tmp_path, images):
    out = str(tmp_path / "o")
    assert main(["fuse", "--ir", str(tmp_path / "none.png"), "--out", out]) == 3
    assert main(["fuse", "--ir", images["gray"], "--vis", images["small"], "--out", out]) == 3
    empty = tmp_path / "exchange"
    empty.mkdir()
    assert main(["fuse", "--ir", images["gray"], "--oracle", f"external:{empty}", "--adapter-timeout", "0.05",
                 "--out", out, *FAST]) == 3


def test_divergence_exit(tmp_path, images):
    exchange = tmp_path / "exchange"
    exchange.mkdir()
    stop = threading.Event()
    th = threading.Thread(target=serve_requests, args=(exchange, lambda x, t: np.full_like(x, 1e305), stop, 0.001))
    th.start()
    try:
        with np.errstate(all="ignore"):
            code = main(["fuse", "--ir", images["gray"], "--oracle", f"external:{exchange}", "--out",
                         str(tmp_path / "o"), *FAST])
    finally:
        stop.set()
        th.join()
    assert code == 4


def test_replay_detects_changed_input(tmp_path, images):
    src = tmp_path / "src.png"
    src.write_bytes(open(images["gray"], "rb").read())
    out = tmp_path / "a"
    main(["fuse", "--inputs", str(src), images["gray2"], "--out", str(out), *FAST])
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(src)
    assert main(["fuse", "--replay", str(out / "manifest.json"), "--out", str(tmp_path / "b")]) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gainfuse", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "validate-theory" in res.stdout
