"""Command-line driver for the congestion-analysis pipeline.

One subcommand per pipeline stage, from dataset synthesis through
suggestion decks and the HTTP service. Every artifact-producing run
writes a manifest capturing the resolved config, input digests, and
artifact digests, so `mllma replay` can re-execute it and verify the
outputs bit for bit.

Config resolution per subcommand: built-in defaults, then the matching
section of the --config file, then explicit flags. Flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .deck import (
    DeckError,
    DeckFormat,
    build_deck,
    deck_to_dict,
    render,
    whatif_payload,
)
from .evolve import EvolveConfig, EvolveError, Mode
from .evolve import run as evolve_run
from .featdsl import (
    DslError,
    extract_table,
    load_feature_manifest,
    save_feature_manifest,
    seed_pool,
)
from .featdsl import eval_feature
from .forest import ForestError, ForestParams, cross_validate, save_forest
from .forest import fit as forest_fit
from .layout import (
    DatasetError,
    GridFormatError,
    SynthConfig,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .llmgen import LlmConfig, TransportMode, make_generator
from .manifest import (
    ManifestError,
    RunManifest,
    canonical_json,
    diff_artifacts,
    hash_path,
    load_manifest,
    record_artifacts,
    save_manifest,
)
from .metrics import krcc, nrmse, peak_nrmse_avg, plcc, srcc, ssim
from .prefmodel import (
    GatePolicy,
    Gating,
    PrefConfig,
    PrefError,
    attribution,
    load_mappred,
    load_pref,
    mappred_fit,
    mappred_predict,
    save_mappred,
    save_pref,
    whatif,
)
from .prefmodel import train as pref_train

PIPELINE_ERRORS = (
    DatasetError, GridFormatError, DslError, EvolveError, ForestError,
    PrefError, DeckError, ManifestError, OSError,
)


class UsageError(Exception):
    """Bad invocation that argparse could not catch (exit code 2)."""


# ---------------------------------------------------------------------------
# Config plumbing

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config file is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping of sections")
    return data


def _resolve(args, section: str, defaults: dict) -> dict:
    """defaults <- config-file section <- flags; flags win."""
    cfg = dict(defaults)
    file_cfg = _load_config_file(getattr(args, "config", None)).get(section, {})
    if not isinstance(file_cfg, dict):
        raise UsageError(f"config section {section!r} must be a mapping")
    for key, value in file_cfg.items():
        if key not in defaults:
            raise UsageError(f"unknown key {key!r} in config section {section!r}")
        cfg[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _require(cfg: dict, key: str, flag: str) -> str:
    value = cfg.get(key)
    if not value:
        raise UsageError(f"{flag} is required (flag or config)")
    return value


def _out_dir(args, command: str) -> Path:
    out = Path(getattr(args, "out", None) or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _finish_run(out: Path, command: str, cfg: dict, inputs: dict[str, str],
                seeds: dict[str, int]) -> None:
    m = RunManifest(command=command, config=cfg, inputs=inputs, seeds=seeds)
    m.artifacts = record_artifacts(out)
    save_manifest(m, out)


def _load_pool(pool_path: str | None):
    if pool_path:
        return load_feature_manifest(pool_path)
    return seed_pool()


def _feature_rows(model, specs_by_name, samples) -> dict[str, np.ndarray]:
    missing = [n for n in model.feature_names if n not in specs_by_name]
    if missing:
        raise UsageError(
            f"feature pool lacks expressions for model features: {missing}")
    ordered = [specs_by_name[n] for n in model.feature_names]
    return {
        s.id: np.array([eval_feature(sp.expr, s) for sp in ordered])
        for s in samples
    }


# ---------------------------------------------------------------------------
# Subcommands

SYNTH_DEFAULTS = {
    "n": 50, "height": 128, "width": 128, "seed": 0,
    "alpha": 1.0, "beta": 2.0, "gamma": 0.5, "noise_sigma": 0.02,
}


def cmd_synth(args) -> int:
    cfg = _resolve(args, "synth", SYNTH_DEFAULTS)
    out = _out_dir(args, "synth")
    samples = synth_dataset(SynthConfig(
        n_samples=int(cfg["n"]), height=int(cfg["height"]),
        width=int(cfg["width"]), alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]), gamma=float(cfg["gamma"]),
        noise_sigma=float(cfg["noise_sigma"]), rng_seed=int(cfg["seed"]),
    ))
    save_dataset(samples, out / "dataset")
    _write_json(out / "summary.json", {
        "n_samples": len(samples),
        "height": int(cfg["height"]),
        "width": int(cfg["width"]),
        "sample_ids": [s.id for s in samples[:3]] + (["..."] if len(samples) > 3 else []),
    })
    _finish_run(out, "synth", cfg, inputs={}, seeds={"synth": int(cfg["seed"])})
    print(f"wrote {len(samples)} samples to {out / 'dataset'}")
    return 0


EXTRACT_DEFAULTS = {"dataset": None, "pool": None}


def cmd_extract(args) -> int:
    cfg = _resolve(args, "extract", EXTRACT_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    out = _out_dir(args, "extract")
    samples = load_dataset(dataset_dir)
    pool = _load_pool(cfg["pool"])
    table = extract_table(pool, samples)
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *table.feature_names, "label"])
        for i, sid in enumerate(table.sample_ids):
            writer.writerow([sid, *[repr(v) for v in table.rows[i].tolist()],
                             repr(float(table.labels[i]))])
    inputs = {"dataset": hash_path(dataset_dir)}
    if cfg["pool"]:
        inputs["pool"] = hash_path(cfg["pool"])
    _finish_run(out, "extract", cfg, inputs=inputs, seeds={})
    print(f"wrote {len(table.sample_ids)} x {len(table.feature_names)} table "
          f"to {out / 'table.csv'}")
    return 0


EVOLVE_DEFAULTS = {
    "dataset": None, "pool": None, "rounds": 5, "mode": "genetic",
    "generator": "mock", "seed": 0, "pool_cap": 20, "batch_size": 8,
    "p_mutation": 0.5, "dedup_threshold": 0.6, "use_dedup_judge": False,
    "fitness_cv_blend": 0.0, "cv_folds": 5, "n_trees": 100,
    "llm_mode": "live", "llm_cassette": None,
}

_MODES = {
    "genetic": Mode.GENETIC,
    "crossover-only": Mode.CROSSOVER_ONLY,
    "mutation-only": Mode.MUTATION_ONLY,
}


def cmd_evolve(args) -> int:
    cfg = _resolve(args, "evolve", EVOLVE_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    if cfg["mode"] not in _MODES:
        raise UsageError(f"unknown mode {cfg['mode']!r} "
                         f"(choose from {', '.join(_MODES)})")
    if cfg["generator"] not in ("mock", "llm"):
        raise UsageError("generator must be 'mock' or 'llm'")
    out = _out_dir(args, "evolve")
    samples = load_dataset(dataset_dir)
    pool = _load_pool(cfg["pool"])
    generator = None
    if cfg["generator"] == "llm":
        generator = make_generator(LlmConfig.from_env(
            mode=TransportMode(cfg["llm_mode"]), cassette=cfg["llm_cassette"]))
    econfig = EvolveConfig(
        n_rounds=int(cfg["rounds"]), pool_cap=int(cfg["pool_cap"]),
        p_mutation=float(cfg["p_mutation"]), mode=_MODES[cfg["mode"]],
        dedup_threshold=float(cfg["dedup_threshold"]),
        batch_size=int(cfg["batch_size"]),
        use_dedup_judge=bool(cfg["use_dedup_judge"]),
        fitness_cv_blend=float(cfg["fitness_cv_blend"]),
        cv_folds=int(cfg["cv_folds"]),
        forest_params=ForestParams(n_trees=int(cfg["n_trees"]),
                                   rng_seed=int(cfg["seed"])),
        rng_seed=int(cfg["seed"]),
    )
    result = evolve_run(econfig, samples, pool, generator)
    save_feature_manifest(result.specs, out / "pool.txt")
    _write_json(out / "summary.json", {
        "rounds": [
            {
                "round": rec.round_index,
                "pool_size": rec.pool_size,
                "cv_r2": rec.cv_r2,
                "cv_plcc": rec.cv_plcc,
                "operation": rec.operation,
            }
            for rec in result.history
        ],
        "importance": {
            s.name: float(v) for s, v in zip(result.specs, result.importance)
        },
    })
    inputs = {"dataset": hash_path(dataset_dir)}
    if cfg["pool"]:
        inputs["pool"] = hash_path(cfg["pool"])
    if cfg["llm_cassette"] and Path(cfg["llm_cassette"]).exists():
        inputs["llm_cassette"] = hash_path(cfg["llm_cassette"])
    _finish_run(out, "evolve", cfg, inputs=inputs, seeds={"evolve": int(cfg["seed"])})
    final = result.history[-1]
    print(f"evolved pool of {len(result.specs)} features "
          f"(cv_r2 {final.cv_r2:.4f}, cv_plcc {final.cv_plcc:.4f}) "
          f"to {out / 'pool.txt'}")
    return 0


TRAIN_FOREST_DEFAULTS = {
    "dataset": None, "pool": None, "n_trees": 100, "max_depth": 12,
    "min_samples_leaf": 2, "features_per_split": 1.0 / 3.0, "cv_folds": 5,
    "seed": 0,
}


def cmd_train_forest(args) -> int:
    cfg = _resolve(args, "train_forest", TRAIN_FOREST_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    out = _out_dir(args, "train-forest")
    samples = load_dataset(dataset_dir)
    pool = _load_pool(cfg["pool"])
    table = extract_table(pool, samples)
    params = ForestParams(
        n_trees=int(cfg["n_trees"]), max_depth=int(cfg["max_depth"]),
        min_samples_leaf=int(cfg["min_samples_leaf"]),
        features_per_split=float(cfg["features_per_split"]),
        rng_seed=int(cfg["seed"]),
    )
    model = forest_fit(table, params)
    save_forest(model, out / "forest.txt")
    cv = cross_validate(table, params, folds=int(cfg["cv_folds"]))
    _write_json(out / "summary.json", {
        "cv_r2": cv.mean_r2,
        "cv_plcc": cv.mean_plcc,
        "importance": {
            name: float(v)
            for name, v in zip(table.feature_names, model.importances)
        },
    })
    inputs = {"dataset": hash_path(dataset_dir)}
    if cfg["pool"]:
        inputs["pool"] = hash_path(cfg["pool"])
    _finish_run(out, "train-forest", cfg, inputs=inputs,
                seeds={"forest": int(cfg["seed"])})
    print(f"forest cv_r2 {cv.mean_r2:.4f} cv_plcc {cv.mean_plcc:.4f}; "
          f"model at {out / 'forest.txt'}")
    return 0


TRAIN_PREF_DEFAULTS = {
    "dataset": None, "pool": None, "gating": "identity", "epochs": 200,
    "learning_rate": 1e-3, "weight_decay": 0.01, "batch_size": 4,
    "feature_loss_weight": 1.0, "hidden": "64,64,64", "seed": 0,
}


def cmd_train_pref(args) -> int:
    cfg = _resolve(args, "train_pref", TRAIN_PREF_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    if cfg["gating"] not in ("identity", "softmax"):
        raise UsageError("gating must be 'identity' or 'softmax'")
    out = _out_dir(args, "train-pref")
    samples = load_dataset(dataset_dir)
    pool = _load_pool(cfg["pool"])
    table = extract_table(pool, samples)
    # the scorer has no intercept, so labels enter training standardized
    label_mu = float(table.labels.mean())
    label_sigma = float(table.labels.std())
    if label_sigma == 0.0:
        raise PrefError("labels are constant; nothing to fit")
    table.labels = (table.labels - label_mu) / label_sigma
    try:
        hidden = tuple(int(h) for h in str(cfg["hidden"]).split(",") if h != "")
    except ValueError:
        raise UsageError(f"bad hidden spec {cfg['hidden']!r}; "
                         "expected comma-separated integers") from None
    model = pref_train(samples, table, PrefConfig(
        hidden=hidden, gating=Gating(cfg["gating"]),
        learning_rate=float(cfg["learning_rate"]),
        weight_decay=float(cfg["weight_decay"]),
        batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]),
        feature_loss_weight=float(cfg["feature_loss_weight"]),
        rng_seed=int(cfg["seed"]),
    ))
    save_pref(model, out / "pref.txt")
    _write_json(out / "summary.json", {
        "feature_names": model.feature_names,
        "gating": model.gating.value,
        "label_mu": label_mu,
        "label_sigma": label_sigma,
        "final_loss": model.curve[-1] if model.curve else None,
    })
    inputs = {"dataset": hash_path(dataset_dir)}
    if cfg["pool"]:
        inputs["pool"] = hash_path(cfg["pool"])
    _finish_run(out, "train-pref", cfg, inputs=inputs,
                seeds={"pref": int(cfg["seed"])})
    print(f"trained scorer on {len(model.feature_names)} features; "
          f"model at {out / 'pref.txt'}")
    return 0


TRAIN_MAP_DEFAULTS = {"dataset": None, "patch_size": 5, "ridge": 1e-6}


def cmd_train_map(args) -> int:
    cfg = _resolve(args, "train_map", TRAIN_MAP_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    out = _out_dir(args, "train-map")
    samples = load_dataset(dataset_dir)
    predictor = mappred_fit(samples, patch_size=int(cfg["patch_size"]),
                            ridge=float(cfg["ridge"]))
    save_mappred(predictor, out / "mappred.txt")
    _write_json(out / "summary.json", {
        "patch_size": predictor.patch_size,
        "ridge": predictor.ridge,
        "n_train": len(samples),
    })
    _finish_run(out, "train-map", cfg,
                inputs={"dataset": hash_path(dataset_dir)}, seeds={})
    print(f"map predictor at {out / 'mappred.txt'}")
    return 0


EVAL_DEFAULTS = {"dataset": None, "model": None, "mappred": None, "pool": None}


def cmd_eval(args) -> int:
    cfg = _resolve(args, "eval", EVAL_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    if not cfg["model"] and not cfg["mappred"]:
        raise UsageError("eval needs --model and/or --mappred")
    out = _out_dir(args, "eval")
    samples = load_dataset(dataset_dir)
    report: dict = {"n_samples": len(samples)}
    if cfg["model"]:
        model = load_pref(cfg["model"])
        specs = {s.name: s for s in _load_pool(cfg["pool"])}
        rows = _feature_rows(model, specs, samples)
        labeled = [s for s in samples if s.label is not None]
        if not labeled:
            raise PrefError("no labeled samples to score against")
        scores = [attribution(model, s, feature_row=rows[s.id]).score
                  for s in labeled]
        labels = [s.label for s in labeled]
        report["pref"] = {
            "plcc": plcc(scores, labels),
            "srcc": srcc(scores, labels),
            "krcc": krcc(scores, labels),
        }
    if cfg["mappred"]:
        predictor = load_mappred(cfg["mappred"])
        with_maps = [s for s in samples if s.congestion is not None]
        if not with_maps:
            raise PrefError("no samples carry a congestion raster")
        ssims, nrmses, peaks = [], [], []
        for s in with_maps:
            pred = mappred_predict(predictor, s)
            ssims.append(ssim(pred.data, s.congestion.data))
            nrmses.append(nrmse(pred.data, s.congestion.data))
            peaks.append(peak_nrmse_avg(pred.data, s.congestion.data))
        report["map"] = {
            "ssim": float(np.mean(ssims)),
            "nrmse": float(np.mean(nrmses)),
            "peak_nrmse": float(np.mean(peaks)),
        }
    _write_json(out / "report.json", report)
    inputs = {"dataset": hash_path(dataset_dir)}
    for key in ("model", "mappred", "pool"):
        if cfg[key]:
            inputs[key] = hash_path(cfg[key])
    _finish_run(out, "eval", cfg, inputs=inputs, seeds={})
    for section in ("pref", "map"):
        if section in report:
            parts = " ".join(f"{k} {v:.4f}" for k, v in report[section].items())
            print(f"{section}: {parts}")
    return 0


DECK_DEFAULTS = {
    "dataset": None, "model": None, "pool": None, "sample": None,
    "top": 5, "window": 32, "format": "markdown",
}


def cmd_deck(args) -> int:
    cfg = _resolve(args, "deck", DECK_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    model_path = _require(cfg, "model", "--model")
    sid = _require(cfg, "sample", "--sample")
    if cfg["format"] not in ("markdown", "json"):
        raise UsageError("format must be 'markdown' or 'json'")
    out = _out_dir(args, "deck")
    samples = load_dataset(dataset_dir)
    by_id = {s.id: s for s in samples}
    if sid not in by_id:
        raise DatasetError(f"unknown sample {sid!r}")
    model = load_pref(model_path)
    specs = {s.name: s for s in _load_pool(cfg["pool"])}
    rows = _feature_rows(model, specs, [by_id[sid]])
    att = attribution(model, by_id[sid], feature_row=rows[sid])
    d = build_deck(att, by_id[sid], m=int(cfg["top"]), specs=specs,
                   window=int(cfg["window"]))
    fmt = DeckFormat(cfg["format"])
    text = render(d, fmt)
    ext = "md" if fmt is DeckFormat.MARKDOWN else "json"
    (out / f"deck.{ext}").write_text(text, encoding="utf-8")
    inputs = {"dataset": hash_path(dataset_dir), "model": hash_path(model_path)}
    if cfg["pool"]:
        inputs["pool"] = hash_path(cfg["pool"])
    _finish_run(out, "deck", cfg, inputs=inputs, seeds={})
    print(text, end="" if text.endswith("\n") else "\n")
    return 0


WHATIF_DEFAULTS = {
    "dataset": None, "model": None, "pool": None, "sample": None,
    "set": None, "gating": "frozen_gating",
}

_GATINGS = {
    "frozen": GatePolicy.FROZEN_GATING,
    "frozen_gating": GatePolicy.FROZEN_GATING,
    "refresh": GatePolicy.REFRESH_GATING,
    "refresh_gating": GatePolicy.REFRESH_GATING,
}


def _parse_overrides(pairs) -> dict[str, float]:
    overrides: dict[str, float] = {}
    for pair in pairs or []:
        name, sep, value = str(pair).partition("=")
        if not sep or not name:
            raise UsageError(f"bad --set {pair!r}; expected feature=value")
        try:
            overrides[name] = float(value)
        except ValueError:
            raise UsageError(f"bad --set value {value!r}; "
                             "expected a number") from None
    return overrides


def cmd_whatif(args) -> int:
    cfg = _resolve(args, "whatif", WHATIF_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    model_path = _require(cfg, "model", "--model")
    sid = _require(cfg, "sample", "--sample")
    if cfg["gating"] not in _GATINGS:
        raise UsageError(f"unknown gating {cfg['gating']!r}")
    out = _out_dir(args, "whatif")
    samples = load_dataset(dataset_dir)
    by_id = {s.id: s for s in samples}
    if sid not in by_id:
        raise DatasetError(f"unknown sample {sid!r}")
    model = load_pref(model_path)
    specs = {s.name: s for s in _load_pool(cfg["pool"])}
    rows = _feature_rows(model, specs, [by_id[sid]])
    overrides = _parse_overrides(cfg["set"])
    policy = _GATINGS[cfg["gating"]]
    report = whatif(model, by_id[sid], overrides, feature_row=rows[sid],
                    policy=policy)
    body = canonical_json(whatif_payload(sid, policy, report))
    (out / "whatif.json").write_text(body + "\n", encoding="utf-8")
    inputs = {"dataset": hash_path(dataset_dir), "model": hash_path(model_path)}
    if cfg["pool"]:
        inputs["pool"] = hash_path(cfg["pool"])
    _finish_run(out, "whatif", cfg, inputs=inputs, seeds={})
    print(body)
    return 0


SERVE_DEFAULTS = {
    "dataset": None, "model": None, "pool": None, "host": "127.0.0.1",
    "port": 8000, "webui": None, "deck_top": 5, "deck_window": 32,
}


def cmd_serve(args) -> int:
    cfg = _resolve(args, "serve", SERVE_DEFAULTS)
    dataset_dir = _require(cfg, "dataset", "--dataset")
    out = _out_dir(args, "serve")
    # imported lazily so CLI-only use never needs the service stack
    import uvicorn

    from .service import build_app, build_state
    state = build_state(
        dataset_dir, model_path=cfg["model"], pool_path=cfg["pool"],
        deck_top=int(cfg["deck_top"]), deck_window=int(cfg["deck_window"]),
        webui_dir=cfg["webui"],
    )
    inputs = {"dataset": hash_path(dataset_dir)}
    for key in ("model", "pool"):
        if cfg[key]:
            inputs[key] = hash_path(cfg[key])
    _finish_run(out, "serve", cfg, inputs=inputs, seeds={})
    app = build_app(state)
    uvicorn.run(app, host=str(cfg["host"]), port=int(cfg["port"]),
                log_level="warning")
    return 0


_REPLAYABLE = {}  # filled after the command table below


def cmd_replay(args) -> int:
    src = load_manifest(args.manifest)
    if src.command not in _REPLAYABLE:
        raise UsageError(f"cannot replay command {src.command!r}")
    out = Path(args.out or f"runs/replay-{src.command}")
    out.mkdir(parents=True, exist_ok=True)
    # inputs must still be what the original run saw
    cfg = src.config
    for name, digest in src.inputs.items():
        path = cfg.get(name)
        if not path or not Path(str(path)).exists():
            raise ManifestError(f"recorded input {name!r} is missing: {path}")
        now = hash_path(str(path))
        if now != digest:
            raise ManifestError(
                f"input {name!r} changed since the original run: {path}")
    sub_args = argparse.Namespace(config=None, out=str(out))
    for key, value in cfg.items():
        setattr(sub_args, key, value)
    code = _REPLAYABLE[src.command](sub_args)
    if code != 0:
        return code
    fresh = load_manifest(out)
    mismatches = diff_artifacts(src.artifacts, fresh.artifacts)
    if mismatches:
        for line in mismatches:
            print(f"replay mismatch: {line}", file=sys.stderr)
        return 1
    print(f"replay of {src.command!r} is bit-identical "
          f"({len(fresh.artifacts)} artifacts)")
    return 0


# ---------------------------------------------------------------------------
# Parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override it")
    p.add_argument("--out", help="run directory (default runs/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mllma",
        description="Layout congestion features: synthesis, evolution, "
                    "scoring, and what-if analysis.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="evaluate a feature pool into a CSV table")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--pool")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evolve", help="run the evolutionary feature search")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--pool")
    p.add_argument("--rounds", type=int)
    p.add_argument("--mode", choices=sorted(_MODES))
    p.add_argument("--generator", choices=("mock", "llm"))
    p.add_argument("--seed", type=int)
    p.add_argument("--pool-cap", dest="pool_cap", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--p-mutation", dest="p_mutation", type=float)
    p.add_argument("--dedup-threshold", dest="dedup_threshold", type=float)
    p.add_argument("--use-dedup-judge", dest="use_dedup_judge",
                   action="store_true", default=None)
    p.add_argument("--fitness-cv-blend", dest="fitness_cv_blend", type=float)
    p.add_argument("--cv-folds", dest="cv_folds", type=int)
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--llm-mode", dest="llm_mode",
                   choices=("live", "record", "replay"))
    p.add_argument("--llm-cassette", dest="llm_cassette")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("train-forest", help="fit the fitness forest on a pool")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--pool")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--min-samples-leaf", dest="min_samples_leaf", type=int)
    p.add_argument("--features-per-split", dest="features_per_split", type=float)
    p.add_argument("--cv-folds", dest="cv_folds", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_forest)

    p = sub.add_parser("train-pref", help="train the preference scoring model")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--pool")
    p.add_argument("--gating", choices=("identity", "softmax"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--feature-loss-weight", dest="feature_loss_weight",
                   type=float)
    p.add_argument("--hidden", help="comma-separated layer sizes, e.g. 64,64,64")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_pref)

    p = sub.add_parser("train-map", help="fit the patch-linear congestion baseline")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--ridge", type=float)
    p.set_defaults(func=cmd_train_map)

    p = sub.add_parser("eval", help="score trained models against a dataset")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--model", help="preference model checkpoint")
    p.add_argument("--mappred", help="map predictor checkpoint")
    p.add_argument("--pool")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("deck", help="emit the suggestion deck for one sample")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--pool")
    p.add_argument("--sample")
    p.add_argument("--top", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--format", choices=("markdown", "json"))
    p.set_defaults(func=cmd_deck)

    p = sub.add_parser("whatif", help="before/after case report for overrides")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--pool")
    p.add_argument("--sample")
    p.add_argument("--set", action="append",
                   help="feature=value override; repeatable")
    p.add_argument("--gating", choices=sorted(_GATINGS))
    p.set_defaults(func=cmd_whatif)

    p = sub.add_parser("serve", help="serve the JSON API (and web UI if built)")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--pool")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--webui", help="directory of built UI assets to serve")
    p.add_argument("--deck-top", dest="deck_top", type=int)
    p.add_argument("--deck-window", dest="deck_window", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="re-run a manifest and verify artifacts")
    p.add_argument("--manifest", required=True,
                   help="manifest.json (or its run directory)")
    p.add_argument("--out", help="directory for the replayed artifacts")
    p.set_defaults(func=cmd_replay)

    return parser


_REPLAYABLE.update({
    "synth": cmd_synth,
    "extract": cmd_extract,
    "evolve": cmd_evolve,
    "train-forest": cmd_train_forest,
    "train-pref": cmd_train_pref,
    "train-map": cmd_train_map,
    "eval": cmd_eval,
    "deck": cmd_deck,
    "whatif": cmd_whatif,
})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mllma: {exc}", file=sys.stderr)
        return 2
    except PIPELINE_ERRORS as exc:
        origin = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"mllma: {origin}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
