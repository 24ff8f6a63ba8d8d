import hashlib
import json

import pytest

from ddg_lab import checkpoint as ckpt
from ddg_lab.cli import EXIT_OK, EXIT_USAGE, main

TINY = """
[run]
iterations = 20
batch_size = 8
val_every = 10
hidden = [8]

[run.manifest]
seed = 3
n_classes = 3
n_domains = 3
per_domain = 24
side = 12
patch = 4

[run.codebook]
size = 8
dim = 4

[paths]
out_dir = "out"
dataset = "data.ddgd"

[ablate]
seeds = [0]
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TINY)
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_missing_config_is_a_usage_error(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.toml")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err
    assert main(["gen-data"]) == EXIT_USAGE


def test_bad_key_is_named(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[run]\nlearning_rate = 0.1\n")
    assert main(["gen-data", "--config", str(path)]) == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err


def test_gen_data_hash_and_overwrite_guard(cfg, tmp_path):
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    first = sha(tmp_path / "data.ddgd")
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_USAGE
    assert main(["gen-data", "--config", str(cfg), "--force"]) == EXIT_OK
    assert sha(tmp_path / "data.ddgd") == first


def test_train_eval_and_inspect(cfg, tmp_path, capsys):
    out = tmp_path / "t"
    assert main(["-q", "train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "checkpoint.ddgck").exists() and (out / "report.json").exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.ddgck")]) == EXIT_OK
    acc = json.loads(capsys.readouterr().out)["accuracy"]
    assert sorted(acc) == ["0", "1", "2"]

    ins = tmp_path / "ins"
    args = ["inspect-codebook", "--checkpoint", str(out / "checkpoint.ddgck"), "--out", str(ins)]
    assert main(args) == EXIT_OK
    first = (ins / "indices.csv").read_text()
    summary = json.loads((ins / "inspect.json").read_text())
    assert summary["cells"] == 72 * 9
    usage = (ins / "usage.csv").read_text().splitlines()[1:]
    assert sum(int(line.split(",")[1]) for line in usage) == 72 * 9
    ql1, cl1 = summary["quantized_l1"], summary["continuous_l1"]
    for i in range(3):
        for j in range(3):
            assert ql1[i][j] <= cl1[i][j] + 1e-12
    assert main(args + ["--force"]) == EXIT_OK
    assert (ins / "indices.csv").read_text() == first


def test_eval_requires_checkpoint():
    assert main(["eval"]) == EXIT_USAGE


def test_loo_rerun_is_byte_identical(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["-q", "loo", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["-q", "loo", "--config", str(cfg), "--out", str(b)]) == EXIT_OK
    rows = (a / "loo.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("target_domain,")
    for name in ["loo.csv", "gaps.csv", "target_0.ddgck", "target_1.ddgck", "target_2.ddgck"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ja, jb = json.loads((a / "loo.json").read_text()), json.loads((b / "loo.json").read_text())
    for j in (ja, jb):
        for r in j["runs"]:
            r.pop("wall_time")
    assert ja == jb
    assert main(["-q", "loo", "--config", str(cfg), "--out", str(a)]) == EXIT_USAGE


def test_seed_flag_overrides_config(cfg, tmp_path):
    assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seed", "5"]) == EXIT_OK
    assert ckpt.load(tmp_path / "s" / "checkpoint.ddgck").config.seed == 5


def test_theorem_check_default_and_user_pairs(tmp_path, capsys):
    assert main(["theorem-check", "--out", str(tmp_path / "th")]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["violations"] == 0
    assert (tmp_path / "th" / "refinement.csv").exists()

    spec = tmp_path / "pairs.toml"
    spec.write_text("[suite]\nn_pairs = 5\n[[pairs]]\np_breakpoints = [0.0, 0.5, 1.0]\n"
                    "p_densities = [1.5, 0.5]\nq_breakpoints = [0.0, 0.5, 1.0]\nq_densities = [1.5, 0.5]\n"
                    "intervals = 2\n")
    assert main(["theorem-check", "--config", str(spec)]) == EXIT_OK
    pair = json.loads(capsys.readouterr().out)["pairs"][0]
    assert pair["continuous_gap"] == 0.0 and pair["discrete_gap"] == 0.0


def test_theorem_check_rejects_negative_mass(tmp_path, capsys):
    spec = tmp_path / "neg.toml"
    spec.write_text("[suite]\nn_pairs = 1\n[[pairs]]\np_breakpoints = [0.0, 0.5, 1.0]\n"
                    "p_densities = [2.5, -0.5]\nq_breakpoints = [0.0, 1.0]\nq_densities = [1.0]\n")
    assert main(["theorem-check", "--config", str(spec)]) == EXIT_USAGE
    assert "nonnegative" in capsys.readouterr().err


def test_ablate_emits_six_rows(cfg, tmp_path):
    path = tmp_path / "abl.toml"
    path.write_text(TINY.replace("iterations = 20", "iterations = 4").replace("val_every = 10", "val_every = 2"))
    assert main(["-q", "ablate", "--config", str(path), "--out", str(tmp_path / "ab")]) == EXIT_OK
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["I", "II", "III", "IV", "V", "VI"]
