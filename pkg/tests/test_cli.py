import json

import numpy as np
import pytest

from texparse.cli import EXIT_CONFIG, EXIT_DATA, main
from texparse.lora_merge import TensorArchive

CONFIG = """
preset = "overfit"
resize = 32

[head]
num_queries = 4
hidden_dim = 16
dec_layers = 1

[loss]
num_points = 64

[optim]
steps = 3
batch_size = 2
log_every = 0

[data]
n = 3
size = 32
unseen_rate = 0.5
"""


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return str(path)


def chain(config, out):
    for cmd in (["synth"], ["train"], ["infer"], ["eval"], ["visualize"]):
        assert main(["--config", config, "--out", str(out), *cmd]) == 0, cmd


def test_chain_is_reproducible(config, tmp_path):
    chain(config, tmp_path / "a")
    chain(config, tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    report = json.loads(a)
    for key in ("COP", "BHP", "CCP", "FPP", "unseen", "seen"):
        assert report[key] is not None, key
    legend = json.loads((tmp_path / "a" / "overlays" / "legend.json").read_text())
    assert len(legend) == 3 and len(list((tmp_path / "a" / "overlays").glob("*.png"))) >= 3


def test_eval_protocol_subset_and_gamma_grid(config, tmp_path):
    out = tmp_path / "r"
    for cmd in (["synth"], ["train"], ["infer"]):
        assert main(["--config", config, "--out", str(out), *cmd]) == 0
    assert main(["--config", config, "--out", str(out), "eval", "--protocols", "COP,BHP",
                 "--gammas", "1,0.75,0.5,0.25", "--no-unseen"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "COP" in report and "BHP" in report and "CCP" not in report and "FPP" not in report
    assert report["unseen"] is None
    rows = report["gamma_ablation"]
    assert [r["gamma"] for r in rows] == [1.0, 0.75, 0.5, 0.25]
    assert all(set(r["protocols"]) == {"COP", "BHP"} for r in rows)


def test_exit_codes(config, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("resize = [")
    assert main(["--config", str(bad), "synth"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "none.toml"), "synth"]) == EXIT_CONFIG
    assert main(["--config", config, "--out", str(tmp_path / "e"), "eval", "--protocols", "XYZ"]) == EXIT_CONFIG
    assert main(["--config", config, "--out", str(tmp_path / "e"), "train"]) == EXIT_DATA
    assert main(["--config", config, "--out", str(tmp_path / "e"), "infer"]) == EXIT_DATA


def test_seed_flag_changes_data(config, tmp_path):
    main(["--config", config, "--out", str(tmp_path / "s1"), "--seed", "1", "synth"])
    main(["--config", config, "--out", str(tmp_path / "s2"), "--seed", "2", "synth"])
    a = (tmp_path / "s1" / "data" / "images" / "synth_0000.png").read_bytes()
    assert a != (tmp_path / "s2" / "data" / "images" / "synth_0000.png").read_bytes()


def test_merge_lora_command(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3)).astype(np.float32)
    a = rng.normal(size=(2, 3)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    TensorArchive({"lin.weight": w}).save(tmp_path / "base.safetensors")
    TensorArchive({"lin.weight.lora_A": a, "lin.weight.lora_B": b}).save(tmp_path / "ad.safetensors")
    code = main(["--out", str(tmp_path), "merge-lora", "--base", str(tmp_path / "base.safetensors"),
                 "--adapters", str(tmp_path / "ad.safetensors"), "--alpha", "4"])
    assert code == 0
    merged = TensorArchive.load(tmp_path / "merged.safetensors").entries["lin.weight"]
    np.testing.assert_allclose(merged, w + 2 * b @ a, rtol=1e-5, atol=1e-6)
    assert main(["--out", str(tmp_path), "merge-lora", "--base", str(tmp_path / "missing"),
                 "--adapters", str(tmp_path / "ad.safetensors"), "--alpha", "1"]) == EXIT_DATA
