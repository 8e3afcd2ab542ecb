import json
import subprocess
import sys

import numpy as np
import pytest

from dupr.cli import main
from dupr.trainer import TrainConfig

TINY = {"steps": 2, "batch_size": 2, "bank_size": 8, "roi_sizes": [2, 2, 2, 2], "image_size": 32,
        "encoder": {"channels": [8, 8, 8, 8], "blocks": 1, "groups": 4, "dim": 8},
        "augment": {"out_size": 32}, "dataset": {"kind": "synthetic", "count": 4, "seed": 1},
        "checkpoint_every": 0}


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "c.json"
    cfg.write_text(json.dumps({**TINY, "out_dir": str(d / "out")}))
    assert main(["pretrain", "--config", str(cfg)]) == 0
    return d / "out" / "final.dupr"


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gradcheck", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config_is_runtime_error(capsys):
    assert main(["pretrain", "--config", "missing.toml"]) == 2
    assert "missing.toml" in capsys.readouterr().err


def test_print_default_config(capsys):
    assert main(["--print-default-config"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert TrainConfig.from_dict(printed) == TrainConfig()


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--op", "relu", "--op", "matmul"]) == 0
    out = capsys.readouterr().out
    assert "relu" in out and "matmul" in out and "FAIL" not in out


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--op", "nope"]) == 1
    assert "nope" in capsys.readouterr().err


def test_gen_data(tmp_path):
    assert main(["--seed", "3", "gen-data", "--out", str(tmp_path), "--count", "2", "--size", "32"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "scene_00000.json", "scene_00000.ppm", "scene_00001.json", "scene_00001.ppm"]
    meta = json.loads((tmp_path / "scene_00000.json").read_text())
    assert set(meta) == {"boxes", "labels"}


def test_pretrain_seed_override_is_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / name)}))
        assert main(["--seed", "5", "pretrain", "--config", str(cfg)]) == 0
        outs.append((tmp_path / name / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_diagnose_commands_write_csvs(ckpt, tmp_path):
    common = ["--ckpt", str(ckpt), "--count", "3", "--size", "32"]
    jobs = {
        "iou-curve": ["--S", "2"],
        "affinity": ["--S", "3", "--pairs", "2"],
        "match": [],
        "knn": ["--k", "2"],
    }
    headers = {"iou-curve": "iou,mean_sim,std,n", "affinity": "col,row,value",
               "match": "src_i,src_j,dst_i,dst_j,sim", "knn": "rank,index,score"}
    for probe, extra in jobs.items():
        out = tmp_path / f"{probe}.csv"
        assert main(["diagnose", probe, *common, "--out", str(out), *extra]) == 0, probe
        assert out.read_text().splitlines()[0] == headers[probe]


def test_diagnose_on_folder(ckpt, tmp_path):
    main(["gen-data", "--out", str(tmp_path / "d"), "--count", "3", "--size", "32"])
    out = tmp_path / "k.csv"
    assert main(["diagnose", "knn", "--ckpt", str(ckpt), "--data", str(tmp_path / "d"),
                 "--out", str(out)]) == 0


def test_diagnose_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.dupr"
    bad.write_bytes(b"XXXX")
    assert main(["diagnose", "knn", "--ckpt", str(bad), "--out", str(tmp_path / "k.csv")]) == 2
    assert "magic" in capsys.readouterr().err


def test_export(ckpt, tmp_path):
    assert main(["export", "--ckpt", str(ckpt), "--out", str(tmp_path / "x")]) == 0
    manifest = json.loads((tmp_path / "x" / "params.json").read_text())
    raw = (tmp_path / "x" / "params.bin").read_bytes()
    t = manifest["tensors"]["stem.conv"]
    arr = np.frombuffer(raw, "<f8", count=int(np.prod(t["shape"])), offset=t["offset"])
    assert arr.reshape(t["shape"]).shape == tuple(t["shape"])
    assert sum(v["nbytes"] for v in manifest["tensors"].values()) == len(raw)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "dupr.cli"], capture_output=True, text=True)
    assert res.returncode == 1 and "usage" in res.stderr
