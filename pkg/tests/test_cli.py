import hashlib
import json
import time

import pytest

from bclip.cli import build_config, env_overrides, main

FAST = ["--train.steps", "2", "--train.micro_batch", "4", "--train.k_sent", "2",
        "--data.train_count", "16", "--data.val_count", "8"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_generate_is_reproducible(tmp_path):
    sums = []
    for _ in range(2):
        assert main(["generate", "--seed", "0", "--count", "5", "--val-count", "2",
                     "--out", str(tmp_path)]) == 0
        sums.append([digest(tmp_path / f) for f in ("train.jsonl", "val.jsonl")])
    assert sums[0] == sums[1]
    assert main(["generate", "--seed", "1", "--count", "5", "--out", str(tmp_path)]) == 0
    assert digest(tmp_path / "train.jsonl") != sums[0][0]


def test_generate_zero_count(tmp_path):
    assert main(["generate", "--count", "0", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "config" in json.loads(lines[0])["meta"]


def test_unknown_key_named(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--world.colour", "3"]) == 2
    assert "world.colour" in capsys.readouterr().err


def test_bad_ini_value(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nsteps = many\n")
    assert main(["generate", "--config", str(ini), "--out", str(tmp_path)]) == 2
    assert "train.steps" in capsys.readouterr().err


def test_layer_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nbeta = 0.2\nlr = 0.003\n")
    env = env_overrides({"BCLIP_TRAIN__BETA": "0.4", "PATH": "/bin"})
    pairs = [("train.beta", "0.2"), ("train.lr", "0.003"), *env, ("train.beta", "0.9")]
    cfg = build_config(pairs)
    assert cfg.train.beta == 0.9 and cfg.train.lr == 0.003
    assert build_config(pairs[:3]).train.beta == 0.4


def test_beta_out_of_range(tmp_path, capsys):
    assert main(["train", "--beta", "1.5", "--out", str(tmp_path)]) == 2
    assert "beta" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["ce", "bce"])
def test_train_modes_accepted(tmp_path, mode):
    assert main(["train", "--mode", mode, "--beta", "0.5", "--out", str(tmp_path), *FAST]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["config"]["train"]["mode"] == mode and "meta" in cfg
    assert (tmp_path / "checkpoint.bclp").exists() and (tmp_path / "summary.csv").exists()


def test_eval_is_repeatable(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), *FAST]) == 0
    reports = []
    out = tmp_path / "eval"
    for _ in range(2):
        assert main(["eval", "--checkpoint", str(run / "checkpoint.bclp"), "--out", str(out),
                     "--tci", *FAST]) == 0
        rep = json.loads((out / "eval.json").read_text())
        rep.pop("meta")
        reports.append(rep)
    assert reports[0] == reports[1]
    assert "tci_t2i_r@1" in reports[0]["metrics"]


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bclp"), "--out", str(tmp_path)]) == 4
    assert "none.bclp" in capsys.readouterr().err


def test_smoke_profile_budget(tmp_path):
    t0 = time.perf_counter()
    assert main(["train", "--profile", "smoke", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 300
    cfg = json.loads((tmp_path / "config.json").read_text())["config"]
    assert cfg["train"]["micro_batch"] == 8 and cfg["train"]["k_sent"] == 3 and cfg["train"]["steps"] == 200


def test_inspect_targets_ce(capsys):
    assert main(["inspect-targets", "--B", "1", "--K", "2", "--beta", "0.5"]) == 0
    assert capsys.readouterr().out.splitlines() == ["0.6667,0.3333", "0.3333,0.6667"]


def test_inspect_targets_bce(capsys):
    assert main(["inspect-targets", "--B", "2", "--K", "1", "--mode", "bce"]) == 0
    assert capsys.readouterr().out.splitlines() == ["1.0000,0.0000", "0.0000,1.0000"]
    assert main(["inspect-targets", "--B", "2", "--K", "1", "--mode", "bce", "--matrix", "w"]) == 0
    assert capsys.readouterr().out.splitlines() == ["1.0000,1.0000", "1.0000,1.0000"]


def test_inspect_targets_calibrated(tmp_path, capsys):
    out = tmp_path / "w.csv"
    assert main(["inspect-targets", "--B", "1", "--K", "6", "--beta", "0.75", "--calibration", "index",
                 "--matrix", "w", "--output", str(out)]) == 0
    first = [float(x) for x in out.read_text().splitlines()[0].split(",")]
    assert first[1:4] == pytest.approx([0.71, 0.68, 0.65], abs=0.005)
    echo = json.loads((tmp_path / "w.csv.config.json").read_text())
    assert echo["config"]["targets"]["beta"] == 0.75


def test_decompose_text(capsys):
    assert main(["decompose", "--text", "a red small circle at the top left . a blue large square at the bottom right ."]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert len(rec["all_sentences"]) == 2
    assert rec["all_phrases"][0] == ["a", "red", "small", "circle", "at", "the", "top", "left"]
    assert rec["K"] == 6 and rec["caption"][:2] == ["a", "red"]


def test_decompose_unknown_token(capsys):
    assert main(["decompose", "--text", "a purple zebra ."]) == 3
    assert "zebra" in capsys.readouterr().err


def test_heatmap_written(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), *FAST]) == 0
    out = tmp_path / "h.csv"
    assert main(["heatmap", "--checkpoint", str(run / "checkpoint.bclp"), "--output", str(out),
                 "--pgm", *FAST]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 7 and all(len(r.split(",")) == 7 for r in rows)
    assert out.with_suffix(".pgm").read_bytes().startswith(b"P5\n7 7\n255\n")
