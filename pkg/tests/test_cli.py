import hashlib
import json

import pytest

from mdpo_lab.cli import main

TINY = {
    "data": {"seed": 7, "n": 40, "confound_rate": 0.7, "eval_n": 12},
    "train": {"epochs": 1, "batch_size": 8, "model": {"d_model": 16, "n_layers": 1, "n_heads": 2}},
    "warm_start": {"steps": 4, "n_records": 64, "batch_size": 8},
}


@pytest.fixture(autouse=True)
def cache(tmp_path, monkeypatch):
    monkeypatch.setenv("MDPO_LAB_CACHE", str(tmp_path / "cache"))


def write_config(tmp_path, name="cfg.json", **patch):
    d = json.loads(json.dumps(TINY))
    for section, values in patch.items():
        d[section].update(values)
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------- gen-data

def test_gen_data_writes_manifest(tmp_path, capsys):
    out = tmp_path / "d" / "train.jsonl"
    code, text, _ = run(capsys, "gen-data", "--seed", 7, "--n", 200, "--confound", 0.7, "--out", out)
    assert code == 0
    assert len(out.read_text().splitlines()) == 200
    man = json.loads((tmp_path / "d" / "train.manifest.json").read_text())
    assert man["seed"] == 7 and man["n"] == 200
    assert man["counts"]["confounded"] == 140 and man["counts"]["clean"] == 60
    assert man["sha256"] == hashlib.sha256(out.read_bytes()).hexdigest()
    assert man["sha256"] in text


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    out = tmp_path / "train.jsonl"
    run(capsys, "gen-data", "--n", 30, "--out", out)
    first = out.read_bytes()
    code, _, err = run(capsys, "gen-data", "--n", 30, "--out", out)
    assert code != 0 and "--force" in err
    code, _, _ = run(capsys, "gen-data", "--n", 30, "--out", out, "--force")
    assert code == 0 and out.read_bytes() == first


def test_gen_data_no_confound(tmp_path, capsys):
    out = tmp_path / "clean.jsonl"
    run(capsys, "gen-data", "--n", 30, "--confound", 0, "--out", out)
    man = json.loads((tmp_path / "clean.manifest.json").read_text())
    assert man["counts"]["confounded"] == 0


def test_gen_data_eval_split_differs(tmp_path, capsys):
    run(capsys, "gen-data", "--n", 30, "--out", tmp_path / "a.jsonl")
    run(capsys, "gen-data", "--n", 30, "--split", "eval", "--out", tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "b.jsonl").read_bytes()


# ---------------------------------------------------------------- train

@pytest.mark.parametrize("objective,expected", [("dpo", "0.693147"), ("mdpo", "2.079442")])
def test_train_prints_step_zero_loss(tmp_path, capsys, objective, expected):
    cfg = write_config(tmp_path)
    code, text, _ = run(capsys, "train", "--config", cfg, "--objective", objective, "--out", tmp_path / "run")
    assert code == 0
    assert f"step 0 loss {expected}" in text
    for name in ("config.json", "metrics.jsonl", "ckpt-epoch1.bin", "reference.bin", "report.json"):
        assert (tmp_path / "run" / name).exists()


def test_train_no_image(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, text, _ = run(capsys, "train", "--config", cfg, "--objective", "dpo", "--no-image",
                        "--out", tmp_path / "run")
    assert code == 0 and "step 0 loss 0.693147" in text
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["train"]["objective"]["no_image"] is True


def test_train_custom_objective_from_config(tmp_path, capsys):
    cfg = write_config(tmp_path, train={"objective": {"anchor": "chosen+rejected"}})
    code, text, _ = run(capsys, "train", "--config", cfg, "--objective", "custom", "--out", tmp_path / "run")
    assert code == 0
    assert "step 0 loss 2.772589" in text       # 4 sigma terms at policy == reference


def test_train_seed_override(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run(capsys, "train", "--config", cfg, "--objective", "dpo", "--seed", 11, "--out", tmp_path / "run")
    assert json.loads((tmp_path / "run" / "config.json").read_text())["train"]["seed"] == 11


def test_train_rerun_is_byte_identical(tmp_path, capsys):
    cfg = write_config(tmp_path)
    for d in ("a", "b"):
        run(capsys, "train", "--config", cfg, "--out", tmp_path / d)
    for name in ("metrics.jsonl", "ckpt-epoch1.bin", "report.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_vocab_mismatch_fails_before_step_zero(tmp_path, capsys):
    cfg = write_config(tmp_path, train={"model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "vocab_size": 12}},
                       warm_start={"model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "vocab_size": 12}})
    code, text, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
    assert code != 0 and "vocab_size" in err
    assert "step 0" not in text
    assert not (tmp_path / "run" / "metrics.jsonl").exists()


def test_train_grid_mismatch_fails_before_step_zero(tmp_path, capsys):
    data = tmp_path / "train.jsonl"
    run(capsys, "gen-data", "--n", 40, "--out", data)
    model = {"d_model": 16, "n_layers": 1, "n_heads": 2, "image_grid": 4, "max_seq_len": 32}
    cfg = write_config(tmp_path, train={"model": model}, warm_start={"model": model})
    code, text, err = run(capsys, "train", "--config", cfg, "--data", data, "--out", tmp_path / "run")
    assert code != 0 and "grid" in err
    assert "step 0" not in text


def test_train_from_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run(capsys, "train", "--config", cfg, "--objective", "dpo", "--out", tmp_path / "first")
    code, text, _ = run(capsys, "train", "--config", cfg, "--objective", "mdpo",
                        "--init", tmp_path / "first" / "ckpt-epoch1.bin", "--out", tmp_path / "second")
    assert code == 0 and "step 0 loss 2.079442" in text


def test_misspelled_config_key_aborts(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"epochz": 1}}))
    code, text, err = run(capsys, "train", "--config", path, "--out", tmp_path / "run")
    assert code != 0 and "unknown" in err
    assert not (tmp_path / "run").exists()


# ---------------------------------------------------------------- evaluate

def test_evaluate_command(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
    code, text, _ = run(capsys, "evaluate", "--config", cfg, "--checkpoint", tmp_path / "run" / "ckpt-epoch1.bin",
                        "--reference", tmp_path / "run" / "reference.bin", "--splits",
                        "--verdicts", tmp_path / "v.jsonl")
    assert code == 0
    report = json.loads(text)
    assert set(report) == {"all", "confounded", "clean"}
    assert len((tmp_path / "v.jsonl").read_text().splitlines()) == 12


# ---------------------------------------------------------------- ablate

def test_ablate_unknown_sweep(tmp_path, capsys):
    code, _, err = run(capsys, "ablate", "--sweep", "colour", "--out", tmp_path / "ab")
    assert code != 0
    for name in ("components", "crop-strategy", "anchor-variant", "data-scale"):
        assert name in err


def test_ablate_components(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, text, _ = run(capsys, "ablate", "--sweep", "components", "--config", cfg, "--out", tmp_path / "ab")
    assert code == 0
    doc = json.loads((tmp_path / "ab" / "components.json").read_text())
    assert [a["arm"] for a in doc["arms"]] == ["mdpo", "-conditional", "-anchored", "-both (dpo)"]
    assert sorted(doc["ranking"]) == sorted(a["arm"] for a in doc["arms"])
    table = (tmp_path / "ab" / "components.txt").read_text()
    assert table in text
    assert len({len(line) for line in table.splitlines()[:5]}) == 1


def test_ablate_parallel_matches_serial(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run(capsys, "ablate", "--sweep", "data-scale", "--config", cfg, "--out", tmp_path / "s")
    code, _, _ = run(capsys, "ablate", "--sweep", "data-scale", "--config", cfg, "--out", tmp_path / "p",
                     "--parallel", 3)
    assert code == 0
    assert (tmp_path / "s" / "data-scale.json").read_bytes() == (tmp_path / "p" / "data-scale.json").read_bytes()
    assert [a["n_train"] for a in json.loads((tmp_path / "p" / "data-scale.json").read_text())["arms"]] == [10, 20, 40]


# ---------------------------------------------------------------- grad-check

def test_grad_check_default_passes(capsys):
    code, text, _ = run(capsys, "grad-check")
    assert code == 0
    assert "PASS  tensor/seed0" in text and "PASS  objectives/seed0" in text


def test_grad_check_tight_tolerance_reports_offenders(capsys):
    code, text, _ = run(capsys, "grad-check", "--suite", "tensor", "--tol", "1e-12", "--top", "3")
    assert code == 1
    assert "worst offenders" in text
    assert "FAILED" in text


def test_grad_check_negative_control(capsys, tmp_path):
    code, text, _ = run(capsys, "grad-check", "--suite", "tensor", "--corrupt", "--json", tmp_path / "g.json")
    assert code == 1
    assert "PASS  tensor/seed0" in text
    assert "FAIL  negative-control" in text
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["tensor/seed0"]["passed"] and not doc["negative-control(corrupted)"]["passed"]
