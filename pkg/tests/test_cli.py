import json
import subprocess
import sys

import numpy as np
import pytest

from fewdomain import benches
from fewdomain.cli import main
from fewdomain.config import config_from_dict, dump_config, load_config
from fewdomain.model import ParameterSet
from fewdomain.pipeline import HEADER, prepare_cells, run_cell

SMALL = {"bench": "mats_pool", "seeds": None, "pretrain_iters": 10, "finetune_iters": 10,
         "hidden_widths": [12, 6], "mats": {"refresh_interval": 4, "probe_per_domain": 30},
         "episodic": {"eta": 0.05, "batch_per_domain": 4}}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_config_bench_overrides(cfg_path):
    cfg = load_config(cfg_path)
    assert cfg.hidden_widths == [12, 6] and cfg.mats.refresh_interval == 4
    assert len(cfg.base_task_specs) == 8 and cfg.finetune_eta == 0.05


def test_config_roundtrip(tmp_path):
    cfg = benches.gamma_pool(seeds=[1, 2])
    dump_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back.seeds == [1, 2] and back.mats == cfg.mats and back.episodic == cfg.episodic
    a = prepare_cells(cfg, "erm", 2, 1, 1.0)[0]
    b = prepare_cells(back, "erm", 2, 1, 1.0)[0]
    assert all(np.array_equal(x.X, y.X) for x, y in zip(a.sources, b.sources))


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"learning_rate": 1})
    with pytest.raises(ValueError, match="bench"):
        config_from_dict({"bench": "nope"})
    with pytest.raises(ValueError, match="bench_args"):
        config_from_dict({"bench_args": {"delta": 3}})


def test_config_feature_file_reference(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-tasks", "--config", str(cfg), "--out", str(tmp_path / "tasks.txt")]) == 0
    spec = dict(SMALL)
    del spec["bench"]
    spec["base_task_specs"] = [{"file": "tasks.txt", "task_id": f"match{i}"} for i in range(2)]
    spec["novel_task_spec"] = {"file": "tasks.txt", "task_id": "novel"}
    (tmp_path / "f.json").write_text(json.dumps(spec))
    capsys.readouterr()
    assert main(["similarity", "--config", str(tmp_path / "f.json")]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "task_id,s,q,sim,p" and [r.split(",")[0] for r in rows[1:]] == ["match0", "match1"]


def test_similarity_rows(cfg_path, capsys):
    assert main(["--config", str(cfg_path), "similarity"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert len(rows) == 8
    p = [float(r.split(",")[4]) for r in rows]
    assert abs(sum(p) - 1) < 1e-12
    for r in rows:
        _, s, q, sim, _ = map(lambda v: v, r.split(","))
        assert float(sim) == pytest.approx(float(s) + float(q), abs=1e-12)


def test_staged_commands_match_run_cell(cfg_path, tmp_path, capsys):
    pre, ft = tmp_path / "pre.npz", tmp_path / "ft.npz"
    assert main(["pretrain", "--config", str(cfg_path), "--seed", "3", "--out", str(pre)]) == 0
    assert main(["finetune", "--config", str(cfg_path), "--seed", "3", "--params", str(pre), "--out", str(ft)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg_path), "--seed", "3", "--params", str(ft)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == HEADER
    cfg = load_config(cfg_path)
    cell = prepare_cells(cfg, cfg.method, cfg.K, 3, 1.0)[0]
    rec, _ = run_cell(cell, cfg)
    assert out[1:] == rec.rows()
    assert set(ParameterSet.load(ft).heads) == {"__novel__"}


def test_experiment_and_sweeps(cfg_path, tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert main(["experiment", "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == HEADER and sum(",ALL," in line for line in lines) == 2
    assert main(["ablate-gamma", "--config", str(cfg_path)]) == 0
    table = capsys.readouterr().out
    assert "mats_gamma0" in table and "±" in table


def test_grid_output_is_idempotent(cfg_path, tmp_path):
    out = tmp_path / "m.csv"
    for _ in range(2):
        assert main(["--config", str(cfg_path), "--out", str(out), "experiment"]) == 0
    assert sum(",ALL," in line for line in out.read_text().splitlines()) == 2


@pytest.mark.parametrize("argv,msg", [
    (["pretrain"], "requires --out"),
    (["evaluate"], "novel_task_spec"),
    (["experiment", "--out", "/nonexistent/dir/m.csv"], "not writable"),
    (["evaluate", "--params", "/nonexistent.npz"], "No such file"),
])
def test_rejected_preconditions(cfg_path, capsys, argv, msg):
    if argv[0] != "evaluate" or "--params" in argv:
        argv = argv + ["--config", str(cfg_path)]
    assert main(argv) != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and err.startswith("error:") and msg in err


def test_bad_config_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"K": 0}')
    assert main(["--config", str(path), "experiment"]) == 1
    path.write_text("{nope")
    assert main(["--config", str(path), "experiment"]) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_module_entry_point(cfg_path):
    proc = subprocess.run([sys.executable, "-m", "fewdomain", "--config", str(cfg_path), "similarity"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("task_id,s,q,sim,p")
    proc = subprocess.run([sys.executable, "-m", "fewdomain", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode != 0
