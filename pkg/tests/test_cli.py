import hashlib
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from roboattn.cli import run_cli
from roboattn.io import load_map, read_json, read_jsonl, save_map


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_unknown_flag_and_command_exit_1(capsys):
    assert run_cli(["bench", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run_cli(["teleport"]) == 1
    assert run_cli([]) == 1


def test_help_exits_0():
    assert run_cli(["--help"]) == 0


def test_fuse_frozen(tmp_path, capsys):
    save_map([[0.8, 0.2]], tmp_path / "a.attn")
    save_map([[0.4, 0.6]], tmp_path / "b.attn")
    code = run_cli(["fuse", str(tmp_path / "a.attn"), str(tmp_path / "b.attn"),
                    "--e", "0", "0.6931471805599453", "--out", str(tmp_path / "f.attn"),
                    "--report", str(tmp_path / "r.json")])
    assert code == 0
    np.testing.assert_allclose(load_map(tmp_path / "f.attn"), [[2 / 3, 1 / 3]], atol=1e-6)
    report = read_json(tmp_path / "r.json")
    assert set(report) == {"final_loss", "e_n", "kld_n", "iterations", "converged"}
    assert report["e_n"] == [0.0, 0.6931471805599453]


def test_fuse_free_e_reports_to_stdout(tmp_path, capsys):
    save_map([[0.8, 0.2]], tmp_path / "a.attn")
    save_map([[0.4, 0.6]], tmp_path / "b.attn")
    code = run_cli(["fuse", str(tmp_path / "a.attn"), str(tmp_path / "b.attn"),
                    "--out", str(tmp_path / "f.attn"), "--max-iter", "50"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["iterations"] <= 50


def test_fuse_errors(tmp_path):
    save_map([[0.8, 0.2]], tmp_path / "a.attn")
    out = str(tmp_path / "f.attn")
    assert run_cli(["fuse", str(tmp_path / "a.attn"), "--e", "0", "1", "--out", out]) == 1
    assert run_cli(["fuse", str(tmp_path / "missing.attn"), "--out", out]) == 2
    save_map([[0.8, 0.2, 0.0]], tmp_path / "c.attn")
    assert run_cli(["fuse", str(tmp_path / "a.attn"), str(tmp_path / "c.attn"), "--out", out]) == 1


def test_mine_and_embed(dataset, tmp_path):
    root = dataset.parent
    priors = tmp_path / "priors.json"
    assert run_cli(["mine", "--manifest", str(dataset), "--masks", str(root / "masks.jsonl"),
                    "--out", str(priors)]) == 0
    sel = read_json(priors)
    assert sel["frequent"] == ["car", "person"]
    assert sel["priors"] == ["person"]

    out = tmp_path / "emb"
    assert run_cli(["embed", "--manifest", str(dataset), "--masks", str(root / "masks.jsonl"),
                    "--priors", str(priors), "--alpha", "0.3", "--out-dir", str(out)]) == 0
    rows = read_jsonl(out / "manifest.jsonl")
    assert len(rows) == 4
    for row in rows:
        for path in row["maps"].values():
            m = load_map(out / path)
            assert m.sum() == pytest.approx(1.0, abs=1e-6)
        assert (out / row["image"]).is_file()

    cat = tmp_path / "cat"
    assert run_cli(["embed", "--manifest", str(dataset), "--masks", str(root / "masks.jsonl"),
                    "--priors", str(priors), "--concat", "--out-dir", str(cat)]) == 0
    stack = np.load(cat / read_jsonl(cat / "manifest.jsonl")[0]["maps"]["mlnet"])
    assert stack.shape == (2, 16, 24)
    assert set(np.unique(stack[1])) == {0.0, 1.0}


def test_mine_rejects_bad_eta(dataset):
    root = dataset.parent
    assert run_cli(["mine", "--manifest", str(dataset), "--masks", str(root / "masks.jsonl"),
                    "--eta", "3"]) == 1


def test_augment_soft_and_vanilla(dataset, tmp_path):
    out = tmp_path / "aug"
    assert run_cli(["augment", "--manifest", str(dataset), "--out-dir", str(out),
                    "--topk", "0.5", "--seed", "3", "--crops"]) == 0
    rows = read_jsonl(out / "manifest.jsonl")
    assert len(rows) == 4 + 2 + 4
    for row in rows:
        assert (out / row["image"]).is_file()
        for p in row["maps"].values():
            assert load_map(out / p).sum() == pytest.approx(1.0, abs=1e-6)

    van = tmp_path / "van"
    assert run_cli(["augment", "--manifest", str(dataset), "--out-dir", str(van),
                    "--mode", "vanilla", "--batch-size", "2"]) == 0
    rows = read_jsonl(van / "manifest.jsonl")
    assert sum(r.get("aug") == "vanilla" for r in rows) == 2


def test_augment_soft_needs_predictions(dataset, tmp_path):
    rows = read_jsonl(dataset)
    for r in rows:
        r.pop("prediction")
    stripped = dataset.parent / "nopred.jsonl"
    stripped.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert run_cli(["augment", "--manifest", str(stripped), "--out-dir", str(tmp_path / "x")]) == 1
    assert run_cli(["augment", "--manifest", str(stripped), "--out-dir", str(tmp_path / "y"),
                    "--mode", "vanilla"]) == 0


def test_corrupt_rerun_identical(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli(["corrupt", "--input-manifest", str(dataset), "--out-dir", str(out),
                        "--seed", "7", "--workers", "2"]) == 0
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    assert _tree_digest(a) == _tree_digest(b)
    rows = read_jsonl(a / "manifest.jsonl")
    assert len(rows) == 4 * 6


def test_corrupt_filters_and_validates(dataset, tmp_path):
    out = tmp_path / "g"
    assert run_cli(["corrupt", "--input-manifest", str(dataset), "--out-dir", str(out),
                    "--kinds", "gaussian", "--severities", "1", "5"]) == 0
    rows = read_jsonl(out / "manifest.jsonl")
    assert {r["kind"] for r in rows} == {"gaussian"} and len(rows) == 8
    bad = tmp_path / "bad"
    assert run_cli(["corrupt", "--input-manifest", str(dataset), "--out-dir", str(bad),
                    "--severities", "9"]) == 1
    assert not bad.exists()
    assert run_cli(["corrupt", "--input-manifest", str(tmp_path / "nope.jsonl"),
                    "--out-dir", str(bad)]) == 2


def test_eval_identical_dirs(dataset, tmp_path):
    gt = dataset.parent / "gt"
    out = tmp_path / "m.json"
    assert run_cli(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(out)]) == 0
    m = read_json(out)
    assert m["n"] == 4
    assert m["kld"] == pytest.approx(0.0, abs=1e-6)
    assert m["cc"] == pytest.approx(1.0)


def test_eval_missing_prediction(dataset, tmp_path):
    pred = tmp_path / "pred"
    shutil.copytree(dataset.parent / "pred", pred)
    next(pred.iterdir()).unlink()
    assert run_cli(["eval", "--pred", str(pred), "--gt", str(dataset.parent / "gt")]) == 1
    assert run_cli(["eval", "--pred", str(tmp_path / "none"), "--gt", str(pred)]) == 2


def test_bench_bundled(tmp_path, capsys):
    assert run_cli(["bench", "--out-dir", str(tmp_path), "--json"]) == 0
    out = capsys.readouterr().out
    assert "RUAP" in out and "Relative mCD" in out
    doc = read_json(tmp_path / "report.json")
    s = doc["tables"][0]["summary"]["RUAP"]
    assert s["mcd_kld"] == pytest.approx(0.529, abs=0.002)
    assert s["relative_mcd_cc"] == pytest.approx(0.846, abs=0.002)


def test_bench_bad_reference(capsys):
    assert run_cli(["bench", "--reference", "Nobody"]) == 1


def test_bias_split(tmp_path, capsys):
    maps = tmp_path / "maps"
    h = w = 16
    y, x = np.mgrid[0:h, 0:w]
    for i, (cy, cx) in enumerate([(7.5, 7.5), (7, 8), (0, 0), (15, 0), (2, 14)]):
        g = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / 4.0)
        save_map(g / g.sum(), maps / f"m{i}.attn")
    out = tmp_path / "splits"
    assert run_cli(["bias-split", "--maps", str(maps), "--gaussian-sigma", "0.15",
                    "--deltas", "1", "3", "--out-dir", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n"] == 5
    s1, s3 = read_json(out / "split_1.json"), read_json(out / "split_3.json")
    assert set(s3["selected"]) <= set(s1["selected"])
    assert set(s1["selected"]) | set(s1["complement"]) == {f"m{i}" for i in range(5)}
    assert "m0" in s1["complement"]


def test_config_env_var(tmp_path, monkeypatch, dataset):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"corruption": {"kinds": ["fog"]}}))
    monkeypatch.setenv("ROBOATTN_CONFIG", str(cfg))
    out = tmp_path / "c"
    assert run_cli(["corrupt", "--input-manifest", str(dataset), "--out-dir", str(out)]) == 0
    assert {r["kind"] for r in read_jsonl(out / "manifest.jsonl")} == {"fog"}
    assert run_cli(["corrupt", "--input-manifest", str(dataset), "--out-dir", str(out),
                    "--kinds", "jpeg"]) == 0
    assert {r["kind"] for r in read_jsonl(out / "manifest.jsonl")} == {"jpeg"}


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "roboattn.cli", "bench"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "ML-Net" in res.stdout
