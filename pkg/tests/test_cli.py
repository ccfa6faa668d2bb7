import csv
import io
import json

import numpy as np
import pytest

from encore_bench import metrics
from encore_bench.cli import main, parse_overrides, read_config
from encore_bench.dataset import PedestrianAgent, SceneScript, render_script, serialize_annotations
from encore_bench.errors import ConfigError

WINDOW = ["--o", "4", "--tau", "6", "--stride", "5"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("generate", "--out", out, "--n_scripts", 8, "--duration", 40, "--seed", 3) == 0
    return out / "corpus.jsonl"


@pytest.fixture(scope="module")
def static_file(tmp_path_factory):
    n = 30
    peds = tuple(
        PedestrianAgent(f"p{i}", lateral=-3.0 + 2 * i, depth=10.0 + 4 * i, heading=0.0, walk_speed=0.0,
                        walking=np.zeros(n, bool))
        for i in range(3)
    )
    script = SceneScript("still", n, 0.0, np.zeros(n), np.zeros(n), peds, seed=0)
    path = tmp_path_factory.mktemp("static") / "static.jsonl"
    serialize_annotations(render_script(script), path)
    return path


def test_eval_constant_position_on_static_corpus(tmp_path, static_file):
    assert run("eval", "--corpus", static_file, "--model", "cp", "--out", tmp_path, *WINDOW) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["rows"]["all"]["n_samples"] > 0
    for row in report["rows"].values():
        for m in metrics.METRIC_NAMES:
            assert row[m] == 0.0


def test_report_schema(tmp_path, corpus_file):
    assert run("eval", "--corpus", corpus_file, "--model", "cv", "--out", tmp_path, *WINDOW) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema"] == metrics.REPORT_SCHEMA
    assert report["factors"] == ["speed", "scale"]
    assert report["columns"][:len(metrics.METRIC_NAMES) + 1] == ["n_samples", *metrics.METRIC_NAMES]
    meta = report["meta"]
    assert meta["conventions"] == metrics.CONVENTIONS
    assert meta["run_config"]["command"] == "eval" and meta["run_config"]["model"] == "cv"
    rows = list(csv.reader(io.StringIO((tmp_path / "report.csv").read_text())))
    assert rows[0][0] == "cell" and {r[0] for r in rows[1:]} == set(report["rows"])


def test_partition_counts_cover_corpus(tmp_path, corpus_file):
    assert run("partition", "--corpus", corpus_file, "--factors", "speed,scale", "--out", tmp_path, *WINDOW) == 0
    doc = json.loads((tmp_path / "partition.json").read_text())
    counts = [c["count"] for c in doc["cells"].values()]
    assert doc["n_samples"] > 0 and sum(counts) == doc["n_samples"]
    ids = [i for c in doc["cells"].values() for i in c["sample_ids"]]
    assert len(ids) == len(set(ids))


def test_train_eval_report_pipeline(tmp_path, corpus_file):
    ckpt = tmp_path / "train"
    assert run("train", "--corpus", corpus_file, "--tiny", "true", "--steps", 3, "--out", ckpt, *WINDOW) == 0
    assert (ckpt / "checkpoint.enc").exists()
    assert (ckpt / "train_log.csv").read_text().startswith("epoch,")
    ev = tmp_path / "eval"
    assert run("eval", "--corpus", corpus_file, "--model", "encore", "--checkpoint", ckpt / "checkpoint.enc",
               "--k", 3, "--out", ev, *WINDOW) == 0
    rep = tmp_path / "report"
    assert run("report", "--corpus", corpus_file, "--per_sample", ev / "per_sample.json", "--out", rep,
               *WINDOW) == 0
    for f in ("scale", "state", "speed", "transition", "action", "motion"):
        assert (rep / "tables" / f"{f}.csv").exists()
    grid = json.loads((rep / "heatmaps" / "speed_scale.json").read_text())
    assert len(grid["grid"]) == 6 and all(len(r) == 7 for r in grid["grid"])
    state = json.loads((rep / "heatmaps" / "speed_state.json").read_text())
    assert state["row_factor"] == "speed" and state["col_factor"] == "state"


def test_ablate_table_rows(tmp_path, corpus_file):
    assert run("ablate", "--train_corpus", corpus_file, "--test_corpus", corpus_file, "--tiny", "true",
               "--steps", 2, "--k", 2, "--out", tmp_path, *WINDOW) == 0
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["name"] for r in doc["rows"]] == ["none", "HSF", "HSF+sFT", "HSF+sFT+POFT", "HSF+sFT+ROT"]
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ablation.csv").read_text())))
    assert [r["name"] for r in rows] == [r["name"] for r in doc["rows"]]


def test_ablate_sweep(tmp_path, corpus_file):
    assert run("ablate", "--train_corpus", corpus_file, "--test_corpus", corpus_file, "--tiny", "true",
               "--steps", 1, "--k", 1, "--mode", "sweep", "--alpha_grid", "0,10", "--gamma_grid", "0.1",
               "--beta_grid", "2", "--out", tmp_path, *WINDOW) == 0
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["alpha"] for r in doc["rows"]] == [0.0, 10.0]
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ablation.csv").read_text())))
    assert rows[0]["name"] == "alpha=0,beta=2,gamma=0.1"


def test_error_is_one_json_line_and_no_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    assert run("eval", "--corpus", tmp_path / "missing.jsonl", "--out", out) == 1
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    err = json.loads(lines[0])
    assert err["error"] == "FileNotFoundError" and "missing.jsonl" in err["message"]
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".never")]


def test_failure_mid_command_leaves_no_partial_files(tmp_path, corpus_file, capsys):
    out = tmp_path / "rep"
    # a bad mode is only rejected after both corpora have loaded
    assert run("ablate", "--train_corpus", corpus_file, "--test_corpus", corpus_file, "--mode", "bogus",
               "--out", out, *WINDOW) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    assert not out.exists()


def test_usage_error_exit_code(capsys):
    assert run("nonsense") == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "UsageError"


def test_flags_override_config_file(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nseed = 1\nout = a\n[eval]\nseed = 2\nmodel = cp\n")
    cfg = read_config("eval", str(ini), parse_overrides(["--seed", "5"]))
    assert cfg.int("seed") == 5 and cfg.str("model") == "cp" and cfg.str("out") == "a"
    assert read_config("eval", str(ini), {}).int("seed") == 2
    assert read_config("train", str(ini), {}).int("seed") == 1


def test_parse_overrides_forms():
    assert parse_overrides(["--alpha-grid=1,2", "--k", "3"]) == {"alpha_grid": "1,2", "k": "3"}
    with pytest.raises(ConfigError):
        parse_overrides(["--k"])
    with pytest.raises(ConfigError):
        parse_overrides(["k", "3"])


def test_config_file_drives_run(tmp_path, static_file):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\no = 4\ntau = 6\nstride = 5\ncorpus = {static_file}\n[eval]\nmodel = cp\n")
    out = tmp_path / "o"
    assert run("eval", "--config", ini, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["run_config"]["model"] == "cp"


def test_reports_byte_identical(tmp_path, corpus_file, monkeypatch):
    ckpt = tmp_path / "t"
    assert run("train", "--corpus", corpus_file, "--tiny", "true", "--steps", 2, "--out", ckpt, *WINDOW) == 0
    out = tmp_path / "e"
    seen = []
    for threads in ("1", "3"):
        monkeypatch.setenv("ENCORE_BENCH_THREADS", threads)
        assert run("eval", "--corpus", corpus_file, "--model", "encore", "--checkpoint",
                   ckpt / "checkpoint.enc", "--k", 2, "--out", out, *WINDOW) == 0
        seen.append({n: (out / n).read_bytes() for n in ("report.json", "report.csv", "per_sample.json")})
    assert seen[0] == seen[1]
