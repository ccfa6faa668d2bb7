"""encore-bench command line: generate, partition, train, eval, report, ablate.

Settings come from an INI file (``--config``) and ``--key value`` flags;
flags win. Keys in ``[run]`` apply to every subcommand, keys in a section
named after the subcommand override them.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import itertools
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, baselines, metrics, scenarios
from ._accel import backend_name
from .dataset import DEFAULT_FPS, load_corpus, random_scripts, render_script, serialize_annotations
from .errors import ConfigError
from .geometry import Split
from .model.config import ABLATIONS, ModelConfig
from .model.encore import Encore
from .model.train import predict as model_predict
from .model.train import train as model_train

COMMANDS = ("generate", "partition", "train", "eval", "report", "ablate")
TABLE_FACTORS = ("scale", "state", "speed", "transition", "action", "motion")
HEATMAPS = (("speed", "scale"), ("speed", "state"))
ABLATION_SCHEMA = "encore-bench/ablation/v1"
PARTITION_SCHEMA = "encore-bench/partition/v1"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class RunConfig:
    """Flat string settings with typed accessors."""

    def __init__(self, command: str, values: dict[str, str]):
        self.command = command
        self.values = dict(values)

    def has(self, key: str) -> bool:
        return key in self.values and self.values[key] != ""

    def str(self, key: str, default: str | None = None) -> str:
        if self.has(key):
            return self.values[key]
        if default is None:
            raise ConfigError(f"missing required setting '{key}'")
        return default

    def int(self, key: str, default: int | None = None) -> int:
        if not self.has(key) and default is not None:
            return default
        try:
            return int(self.str(key))
        except ValueError:
            raise ConfigError(f"'{key}' must be an integer, got {self.values[key]!r}") from None

    def float(self, key: str, default: float | None = None) -> float:
        if not self.has(key) and default is not None:
            return default
        try:
            return float(self.str(key))
        except ValueError:
            raise ConfigError(f"'{key}' must be a number, got {self.values[key]!r}") from None

    def bool(self, key: str, default: bool = False) -> bool:
        if not self.has(key):
            return default
        v = self.values[key].strip().lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"'{key}' must be a boolean, got {self.values[key]!r}")

    def list(self, key: str, default: str) -> list[str]:
        return [p.strip() for p in self.str(key, default).split(",") if p.strip()]

    def path(self, key: str, must_exist: bool = True) -> Path:
        p = Path(self.str(key))
        if must_exist and not p.exists():
            raise FileNotFoundError(f"{key}: {p} does not exist")
        return p

    def resolved(self) -> dict:
        return {"command": self.command, **dict(sorted(self.values.items()))}


def read_config(command: str, config_file: str | None, overrides: dict[str, str]) -> RunConfig:
    values: dict[str, str] = {}
    if config_file:
        if not Path(config_file).exists():
            raise FileNotFoundError(f"config file {config_file} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        parser.read(config_file)
        for section in ("run", command):
            if parser.has_section(section):
                values.update(parser.items(section))
    values.update(overrides)
    return RunConfig(command, values)


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("ENCORE_BENCH_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))


@contextmanager
def staged_output(out_dir: Path):
    """Write into a scratch directory; publish into ``out_dir`` only on success."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out_dir.mkdir(exist_ok=True)
    for src in sorted(stage.rglob("*")):
        if src.is_file():
            dst = out_dir / src.relative_to(stage)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
    shutil.rmtree(stage, ignore_errors=True)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"tool_version": __version__, "run_config": cfg.resolved(), **extra}


# --------------------------------------------------------------------------
# settings shared by several subcommands
# --------------------------------------------------------------------------


def _corpus(cfg: RunConfig, key: str = "corpus", split: Split = Split.TRAIN):
    ratio = cfg.float("ratio") if cfg.has("ratio") else None
    stride = cfg.int("stride") if cfg.has("stride") else None
    return load_corpus(
        cfg.path(key),
        o=cfg.int("o", 15),
        tau=cfg.int("tau", 45),
        stride=stride,
        fps=cfg.float("fps", DEFAULT_FPS),
        split=split,
        ratio=ratio,
    )


def _label_config(cfg: RunConfig) -> scenarios.LabelConfig:
    return scenarios.LabelConfig(
        yaw_threshold_deg=cfg.float("yaw_threshold_deg", 5.0),
        accel_threshold=cfg.float("accel_threshold", 0.3),
        zero_speed_kmh=cfg.float("zero_speed_kmh", 0.1),
    )


def _factors(cfg: RunConfig, default: str = "speed,scale") -> list[str]:
    factors = cfg.list("factors", default)
    if len(factors) > 2:
        raise ConfigError("the command line supports at most two factors per partition")
    return factors


def _parse_field(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v not in _TRUE | _FALSE:
            raise ConfigError(f"expected a boolean, got {value!r}")
        return v in _TRUE
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(int(p) for p in parts) if default and isinstance(default[0], int) else tuple(parts)
    if default is None:
        return None if value.lower() in ("", "none") else int(value)
    return value


def model_config(cfg: RunConfig) -> ModelConfig:
    base = ModelConfig.tiny() if cfg.bool("tiny") else ModelConfig()
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name in ("extra", "obs_len", "pred_len") or not cfg.has(f.name):
            continue
        try:
            kwargs[f.name] = _parse_field(cfg.str(f.name), getattr(base, f.name))
        except ValueError:
            raise ConfigError(f"bad value for {f.name}: {cfg.str(f.name)!r}") from None
    if cfg.has("seed"):
        kwargs.setdefault("seed", cfg.int("seed"))
    if cfg.has("steps"):
        kwargs["max_steps"] = cfg.int("steps")
    return base.replace(**kwargs)


def _predict_encore(model: Encore, samples, k: int | None, seed: int, chunk: int = 64) -> np.ndarray:
    # fixed chunking with per-chunk seeds: output does not depend on the worker count
    chunks = [samples[i : i + chunk] for i in range(0, len(samples), chunk)]
    if not chunks:
        return model_predict(model, [], k=k, seed=seed)
    with ThreadPoolExecutor(max_workers=worker_count(len(chunks))) as pool:
        parts = list(pool.map(
            lambda ic: model_predict(model, ic[1], k=k, seed=seed + ic[0], batch_size=chunk),
            enumerate(chunks),
        ))
    return np.concatenate(parts, axis=0)


def _scores(model: Encore, corpus, cfg: RunConfig) -> metrics.SampleMetrics:
    preds = _predict_encore(model, list(corpus.samples), cfg.int("k", model.config.k_samples),
                            cfg.int("seed", 0))
    return metrics.evaluate(corpus, preds, eps=cfg.float("edge_eps", 1.0))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path) -> None:
    scripts = random_scripts(
        cfg.int("n_scripts", 50),
        seed=cfg.int("seed", 0),
        duration=cfg.int("duration", 90),
        n_pedestrians=cfg.int("n_pedestrians", 2),
        walking_only=cfg.bool("walking_only"),
        allow_turns=cfg.bool("allow_turns", True),
        allow_accel=cfg.bool("allow_accel", True),
        ego_speed=cfg.float("ego_speed") if cfg.has("ego_speed") else None,
        p_edge=cfg.float("p_edge", 0.2),
        fps=cfg.float("fps", DEFAULT_FPS),
    )
    tracks = [t for s in scripts for t in render_script(s)]
    name = cfg.str("filename", "corpus.jsonl")
    serialize_annotations(tracks, out / name)
    summary = {
        "schema": "encore-bench/generate/v1",
        "file": name,
        "n_scripts": len(scripts),
        "n_tracks": len(tracks),
        "n_frames": int(sum(len(t) for t in tracks)),
        "meta": _meta(cfg),
    }
    _write(out / "generate.json", metrics.dumps(summary))


def cmd_partition(cfg: RunConfig, out: Path) -> None:
    corpus = _corpus(cfg)
    part = scenarios.partition(corpus, _factors(cfg), _label_config(cfg))
    doc = {"schema": PARTITION_SCHEMA, **part.to_json(), "meta": _meta(cfg)}
    _write(out / "partition.json", metrics.dumps(doc))


def cmd_train(cfg: RunConfig, out: Path) -> None:
    corpus = _corpus(cfg)
    mcfg = model_config(cfg)
    result = model_train(corpus, mcfg)
    result.model.save(out / "checkpoint.enc", extra_header={"run_config": cfg.resolved()})
    _write(out / "train_log.csv", result.history_csv())


def _load_model(cfg: RunConfig) -> Encore:
    return Encore.load(cfg.path("checkpoint"))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    corpus = _corpus(cfg, split=Split.TEST)
    name = cfg.str("model", "constant_velocity")
    if name.lower() == "encore":
        model = _load_model(cfg)
        per_sample = _scores(model, corpus, cfg)
        model_meta = {"name": "encore", "config": model.config.to_dict()}
    else:
        kind = baselines.parse_kind(name)
        preds = baselines.predict_corpus(kind, corpus)
        per_sample = metrics.evaluate(corpus, preds, eps=cfg.float("edge_eps", 1.0))
        model_meta = {"name": kind.value}
    part = scenarios.partition(corpus, _factors(cfg), _label_config(cfg))
    report = metrics.build_report(per_sample, part, _meta(
        cfg, model=model_meta, visible_aspect_ratio=corpus.visible_aspect_ratio,
    ))
    _write(out / "report.json", metrics.dumps(report.to_json()))
    _write(out / "report.csv", report.to_csv())
    _write(out / "per_sample.json", metrics.dumps(per_sample.to_json()))


def cmd_report(cfg: RunConfig, out: Path) -> None:
    """Single-factor tables and two-factor heatmap grids from saved per-sample scores."""
    corpus = _corpus(cfg, split=Split.TEST)
    per_sample = metrics.SampleMetrics.from_json(json.loads(cfg.path("per_sample").read_text()))
    ids = tuple(s.sample_id for s in corpus.samples)
    if per_sample.sample_ids != ids:
        raise ConfigError("per-sample scores do not match the corpus sample ids")
    lcfg = _label_config(cfg)
    keys = scenarios.label_corpus(corpus, lcfg)
    meta = _meta(cfg, visible_aspect_ratio=corpus.visible_aspect_ratio)
    metric = cfg.str("metric", "sB_MSE")
    if metric not in metrics.METRIC_NAMES:
        raise ConfigError(f"unknown metric {metric!r}")
    for factor in TABLE_FACTORS:
        part = scenarios.partition(corpus, [factor], lcfg, keys=keys)
        rep = metrics.build_report(per_sample, part, meta)
        _write(out / "tables" / f"{factor}.csv", rep.to_csv())
        _write(out / "tables" / f"{factor}.json", metrics.dumps(rep.to_json()))
    for rows, cols in HEATMAPS:
        part = scenarios.partition(corpus, [rows, cols], lcfg, keys=keys)
        rep = metrics.build_report(per_sample, part, meta)
        grid = rep.heatmap(metric)
        grid["meta"] = meta
        _write(out / "heatmaps" / f"{rows}_{cols}.json", metrics.dumps(grid))


def _ablation_row(name: str, mcfg: ModelConfig, train_c, test_c, cfg: RunConfig) -> dict:
    result = model_train(train_c, mcfg)
    per_sample = _scores(result.model, test_c, cfg)
    overall = metrics.aggregate(per_sample, range(len(per_sample)))
    flags = {f: getattr(mcfg, f) for f in ("use_hsf", "use_sft", "use_poft", "use_rot")}
    weights = {w: getattr(mcfg, w) for w in ("alpha", "beta", "gamma")}
    return {"name": name, **flags, **weights,
            **{m: overall[m] for m in ("n_samples", *metrics.METRIC_NAMES)}}


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    train_c = _corpus(cfg, "train_corpus")
    test_c = _corpus(cfg, "test_corpus", split=Split.TEST)
    base = model_config(cfg)
    mode = cfg.str("mode", "table")
    runs: list[tuple[str, ModelConfig]] = []
    if mode == "table":
        runs = [(name, base.replace(**flags)) for name, flags in ABLATIONS.items()]
    elif mode == "sweep":
        grids = [[float(v) for v in cfg.list(f"{w}_grid", str(getattr(base, w)))]
                 for w in ("alpha", "beta", "gamma")]
        for a, b, g in itertools.product(*grids):
            runs.append((f"alpha={a:g},beta={b:g},gamma={g:g}", base.replace(alpha=a, beta=b, gamma=g)))
    else:
        raise ConfigError(f"mode must be 'table' or 'sweep', got {mode!r}")
    rows = [_ablation_row(name, mcfg, train_c, test_c, cfg) for name, mcfg in runs]

    cols = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    _write(out / "ablation.csv", buf.getvalue())
    doc = {"schema": ABLATION_SCHEMA, "mode": mode, "rows": rows,
           "meta": _meta(cfg, model_config=base.to_dict(), conventions=metrics.CONVENTIONS)}
    _write(out / "ablation.json", metrics.dumps(doc))


HANDLERS = {
    "generate": cmd_generate,
    "partition": cmd_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="encore-bench",
        allow_abbrev=False,
        description="Scenario-based pedestrian trajectory benchmark.",
        epilog="Any other setting is passed as --key value and overrides the config file.",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI file with [run] and per-command sections")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({backend_name()})")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = build_parser().parse_known_args(argv)
        cfg = read_config(args.command, args.config, parse_overrides(rest))
        out = Path(cfg.str("out", "out"))
        with staged_output(out) as stage:
            HANDLERS[args.command](cfg, stage)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        print(json.dumps({"error": "UsageError", "message": "invalid command line"}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
