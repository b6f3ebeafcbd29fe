"""Command-line entry point: ``unlearn-lab <subcommand> [--section.key value ...]``."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, divergence_lab, markov_lab
from .errors import NumericError, UnlearnLabError
from .influence import influence_on_forget, influence_report, loo_agreement, loo_oracle
from .kernels import BACKEND
from .metrics import append_runs_csv
from .model_core import ClassifierState, ExtractorSpec, TrainConfig, extract_features, train_classifier
from .pipeline import Problem
from .synth_data import (
    gen_gaussian_classes,
    gen_markov_sequences,
    load_dataset_with_split,
    make_split,
    save_corpus,
    save_dataset,
)
from .unlearn import METHODS, UnlearnConfig, newton_removal, retrain_oracle, run_method

log = logging.getLogger("unlearn_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "UNLEARN_LAB_SEED"
TRAJECTORY_COLUMNS = ["epoch", "forget_acc", "retain_acc", "test_acc", "mia", "w_dist"]
LOO_COLUMNS = ["index", "delta_loss", "influence"]

DEFAULTS: dict = {
    "dataset": {"preset": "gaussian3", "classes": 3, "d_in": 8, "n_per_class": 200, "spread": 0.3, "seed": 0,
                "n_per_source": 200, "T_len": 20},
    "split": {"mode": "class_wise", "target_class": 2, "fraction": 0.1, "seed": 0},
    "model": {"extractor": "random_relu", "d_feat": 16, "extractor_seed": None},
    "train": {"l2": 1e-3, "tol": 1e-6, "max_epochs": 50_000, "learning_rate": None},
    "unlearn": {k: v for k, v in asdict(UnlearnConfig()).items()},
    "metrics": {"retrain": True},
    "oracle": {"probes": 40, "damping": 1e-3, "hessian": "train"},
    "divergence": {"seeds": 10, "eta": 0.1, "steps": 50, "record_every": 10, "beta": 1.0, "mode": "frozen"},
    "markov": markov_lab.MarkovConfig().to_dict(),
}
DEFAULTS["unlearn"]["stop_forget_acc"] = None

# short flags folded into the flat namespace
ALIASES = {"--method": "unlearn.method", "--nu": "unlearn.update_frequency", "--r": "unlearn.top_ratio",
           "--eta": "unlearn.learning_rate", "--epochs": "unlearn.epochs", "--seed": "dataset.seed",
           "--preset": "dataset.preset"}


class ConfigError(UnlearnLabError):
    pass


# ------------------------------------------------------------------- config


def _coerce(raw: str, default):
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        try:
            return float(raw) if any(c in raw for c in ".eE") or default is not None else int(raw)
        except ValueError:
            if default is None:
                return raw
            raise
    if isinstance(default, list):
        return [int(v) if v.strip().lstrip("-").isdigit() else v.strip() for v in raw.split(",")]
    return raw


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for sec, vals in extra.items():
        if sec not in out or not isinstance(vals, dict):
            raise ConfigError(f"unknown config section {sec!r}")
        for k, v in vals.items():
            if k not in out[sec]:
                raise ConfigError(f"unknown key {sec}.{k}")
            out[sec][k] = v
    return out


def resolve_config(overrides: list[str], config_file: str | None = None) -> dict:
    """Defaults, then an optional JSON file, then ``--section.key value`` flags, then the seed env var."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_file:
        try:
            cfg = _merge(cfg, json.loads(Path(config_file).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
    it = iter(overrides)
    for tok in it:
        if "=" in tok and tok.startswith("--"):
            tok, val = tok.split("=", 1)
        else:
            val = next(it, None)
        key = ALIASES.get(tok, tok[2:] if tok.startswith("--") else None)
        if key is None or "." not in key or val is None:
            raise ConfigError(f"cannot parse override {tok!r}")
        sec, name = key.split(".", 1)
        if sec not in cfg or name not in cfg[sec]:
            raise ConfigError(f"unknown key {key}")
        try:
            cfg[sec][name] = _coerce(val, DEFAULTS[sec][name])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r}") from exc
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg["dataset"]["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _save_config(out: Path, cfg: dict, command: str) -> None:
    _write_json(out / "config.json", {"command": command, "version": __version__, "backend": BACKEND, **cfg})


def _train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(learning_rate=t["learning_rate"], max_epochs=int(t["max_epochs"]), tol=float(t["tol"]),
                       l2=float(t["l2"]))


def _extractor(cfg, d_in: int) -> ExtractorSpec:
    m = cfg["model"]
    if m["extractor"] == "identity":
        return ExtractorSpec.identity(d_in)
    seed = m["extractor_seed"]
    seed = cfg["dataset"]["seed"] + 100 if seed is None else int(seed)
    return ExtractorSpec.random_relu(d_in, int(m["d_feat"]), seed)


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_problem(args, cfg, need_model: bool = True) -> Problem:
    ds, split = load_dataset_with_split(_need(args.data, "data"))
    if split is None:
        sp = cfg["split"]
        if sp["mode"] == "class_wise":
            split = make_split(ds, "class_wise", target_class=sp["target_class"])
        else:
            split = make_split(ds, sp["mode"], fraction=sp["fraction"], seed=sp["seed"])
    tcfg = _train_config(cfg)
    if need_model:
        model = ClassifierState.load(_need(args.model, "model"))
        ext = model.extractor or ExtractorSpec.identity(ds.dim)
    else:
        model, ext = None, _extractor(cfg, ds.dim)
    Z = extract_features(ext, ds.features)
    retrained = None
    if cfg["metrics"]["retrain"] and need_model:
        r = split.retain_indices
        retrained = retrain_oracle(Z[r], ds.labels[r], ds.class_count, tcfg, ext)
    return Problem(ds, split, ext, Z, model, retrained, tcfg)


# --------------------------------------------------------------- commands


def cmd_gen(args, cfg) -> int:
    out = _outdir(args.out)
    d = cfg["dataset"]
    if d["preset"] == "gaussian3":
        ds = gen_gaussian_classes(int(d["classes"]), int(d["d_in"]), int(d["n_per_class"]), float(d["spread"]),
                                  int(d["seed"]))
        sp = cfg["split"]
        if sp["mode"] == "class_wise":
            split = make_split(ds, "class_wise", target_class=sp["target_class"])
        else:
            split = make_split(ds, sp["mode"], fraction=sp["fraction"], seed=sp["seed"])
        save_dataset(ds, out / "dataset.csv", split)
        files = ["dataset.csv"]
        manifest = {"n": ds.n, "dim": ds.dim, "class_count": ds.class_count, "forget": len(split.forget_indices),
                    "retain": len(split.retain_indices), "test": len(split.test_indices)}
    elif d["preset"] == "markov":
        corpus = gen_markov_sequences(int(d["n_per_source"]), int(d["T_len"]), int(d["seed"]))
        save_corpus(corpus, out / "corpus.csv")
        files = ["corpus.csv"]
        manifest = {"sequences": len(corpus), "T_len": int(d["T_len"])}
    else:
        raise ConfigError(f"unknown preset {d['preset']!r}; valid: gaussian3, markov")
    _write_json(out / "manifest.json", {"preset": d["preset"], "seed": d["seed"], "files": files, **manifest})
    _save_config(out, cfg, "gen")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    prob = _load_problem(args, cfg, need_model=False)
    out = _outdir(args.out)
    Ztr, ytr = prob.train
    res = train_classifier(Ztr, ytr, prob.n_classes, prob.train_cfg, extractor=prob.extractor)
    res.state.save(out / "model.json")
    _write_json(out / "train_report.json", {"epochs": res.epochs, "grad_norm": res.grad_norm, "loss": res.loss,
                                            "converged": res.converged, "tol": prob.train_cfg.tol})
    _save_config(out, cfg, "train")
    if not res.converged:
        log.error("training did not converge (|g|=%.3g > tol)", res.grad_norm)
        return EXIT_NUMERIC
    return EXIT_OK


def _unlearn_config(cfg) -> UnlearnConfig:
    u = dict(cfg["unlearn"])
    method = u["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    return UnlearnConfig(**u)


def cmd_unlearn(args, cfg) -> int:
    ucfg = _unlearn_config(cfg)
    prob = _load_problem(args, cfg)
    out = _outdir(args.out)
    ev = prob.evaluator()
    Zf, yf = prob.forget
    per_epoch, weights_info, extra = [], None, {}
    if ucfg.method == "newton":
        t0 = time.perf_counter()
        final = newton_removal(prob.model, Zf, yf, prob.n_train, ucfg.damping, prob.train_cfg.l2,
                               hessian_Z=prob.train[0])
        secs = time.perf_counter() - t0
        per_epoch = [ev(final, secs)]
    elif ucfg.method == "retrain":
        final = prob.retrained or retrain_oracle(*prob.retain, prob.n_classes, prob.train_cfg, prob.extractor)
        per_epoch = [ev(final, 0.0)]
        secs = 0.0
    else:
        run = run_method(prob.model, Zf, yf, ucfg, ev)
        final, per_epoch, secs = run.final, run.per_epoch, run.wall_clock_seconds
        extra = {"diverged": run.diverged, "warnings": run.warnings, "epochs_run": run.epochs_run}
        if run.influence:
            run.influence[0].to_csv(out / "influence.csv")
            weights_info = [w.tolist() for w in run.per_epoch_weights[:1]]
        if run.diverged:
            log.error("%s diverged", ucfg.method)
    final.save(out / "model.json")
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for e, r in enumerate(per_epoch, 1):
            w.writerow([e, r.acc_forget, r.acc_retain, r.acc_test, r.mia, r.w_dist])
    initial = ev(prob.model)
    _write_json(out / "run.json", {
        "method": ucfg.method, "seed": cfg["dataset"]["seed"], "config": cfg, "backend": BACKEND,
        "initial": asdict(initial), "final": asdict(per_epoch[-1]) if per_epoch else None,
        "per_epoch": [asdict(r) for r in per_epoch], "wall_clock_seconds": secs,
        "initial_weights": weights_info, **extra,
    })
    _save_config(out, cfg, "unlearn")
    if per_epoch:
        append_runs_csv(out / "runs.csv", [{"run_id": out.name, "method": ucfg.method,
                                             "seed": cfg["dataset"]["seed"], **asdict(per_epoch[-1])}])
    return EXIT_NUMERIC if extra.get("diverged") else EXIT_OK


def cmd_eval(args, cfg) -> int:
    prob = _load_problem(args, cfg)
    out = _outdir(args.out)
    rep = prob.evaluator()(prob.model)
    _write_json(out / "eval.json", asdict(rep))
    append_runs_csv(out / "runs.csv", [{"run_id": out.name, "method": "eval", "seed": cfg["dataset"]["seed"],
                                         **asdict(rep)}])
    _save_config(out, cfg, "eval")
    return EXIT_OK


def cmd_oracle(args, cfg) -> int:
    o = cfg["oracle"]
    tcfg = _train_config(cfg)
    if tcfg.l2 <= 0:
        raise ConfigError("the LOO oracle needs train.l2 > 0 (the problem must be strictly convex)")
    if float(o["damping"]) < 0:
        raise ConfigError("oracle.damping must be >= 0")
    c2 = copy.deepcopy(cfg)
    c2["metrics"]["retrain"] = False
    prob = _load_problem(args, c2)
    out = _outdir(args.out)
    Ztr, ytr = prob.train
    pos = np.searchsorted(prob.split.train_indices, prob.split.forget_indices)
    Zf, yf = Ztr[pos], ytr[pos]
    k = min(int(o["probes"]), len(pos))
    probe = pos[:k]
    hz = Ztr if o["hessian"] == "train" else None
    l2 = tcfg.l2 if o["hessian"] == "train" else 0.0
    raw, _ = influence_on_forget(prob.model, Zf, yf, float(o["damping"]), hessian_Z=hz, l2=l2)
    recs = loo_oracle(Ztr, ytr, prob.n_classes, pos, probe, tcfg, base=prob.model)
    with open(out / "loo.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOO_COLUMNS)
        for r, inf in zip(recs, raw[:k]):
            w.writerow([r.index, repr(r.delta_loss), repr(float(inf))])
    rho = loo_agreement(raw[:k], recs)
    _write_json(out / "summary.json", {"spearman": rho, "probes": k, "hessian": o["hessian"],
                                       "damping": float(o["damping"])})
    _save_config(out, cfg, "oracle")
    return EXIT_OK


def cmd_divergence(args, cfg) -> int:
    d = cfg["divergence"]
    out = _outdir(args.out)
    seed0 = int(cfg["dataset"]["seed"])
    rows = divergence_lab.divergence_rows(range(seed0, seed0 + int(d["seeds"])), eta=float(d["eta"]),
                                          steps=int(d["steps"]), record_every=int(d["record_every"]),
                                          beta=float(d["beta"]), mode=d["mode"])
    divergence_lab.write_divergence_csv(out / "divergence.csv", rows)
    _save_config(out, cfg, "divergence")
    return EXIT_OK


def cmd_markov(args, cfg) -> int:
    m = dict(cfg["markov"])
    m["grid"] = tuple(int(g) for g in m["grid"])
    m["methods"] = tuple(m["methods"])
    mcfg = markov_lab.MarkovConfig(**m)
    out = _outdir(args.out)
    res = markov_lab.run_case_study(mcfg)
    markov_lab.write_case_study_csv(out / "case_study.csv", res)
    _write_json(out / "case_study_grid.json", {
        "original": asdict(res.original),
        "grid": {k: {str(e): asdict(t) for e, t in v.items()} for k, v in res.grid.items()},
    })
    _save_config(out, cfg, "markov")
    return EXIT_OK


REPORT_FIELDS = ["acc_forget", "acc_retain", "acc_test", "mia", "w_dist", "runtime_seconds"]


def cmd_report(args, cfg) -> int:
    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    groups: dict[str, list[dict]] = {}
    for d in args.runs:
        p = Path(d) / "run.json"
        if not p.exists():
            raise ConfigError(f"missing run directory or run.json: {d}")
        run = json.loads(p.read_text())
        fin = dict(run["final"])
        fin["runtime_seconds"] = run.get("wall_clock_seconds", fin.get("runtime_seconds", 0.0))
        groups.setdefault(run["method"], []).append(fin)
    out = _outdir(args.out)
    rows = []
    for method, finals in groups.items():
        row = {"method": method, "n_runs": len(finals)}
        for f in REPORT_FIELDS:
            vals = np.array([r[f] for r in finals], dtype=np.float64)
            row[f + "_mean"] = float(vals.mean())
            row[f + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    cols = ["method", "n_runs"] + [f + s for f in REPORT_FIELDS for s in ("_mean", "_std")]
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    lines = ["| method | runs | " + " | ".join(REPORT_FIELDS) + " |", "|---|---|" + "---|" * len(REPORT_FIELDS)]
    for r in rows:
        cells = []
        for f in REPORT_FIELDS:
            scale = 1.0 if f in ("w_dist", "runtime_seconds") else 100.0
            cells.append(f"{scale * r[f + '_mean']:.2f}±{scale * r[f + '_std']:.2f}")
        lines.append(f"| {r['method']} | {r['n_runs']} | " + " | ".join(cells) + " |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _save_config(out, cfg, "report")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "unlearn": cmd_unlearn, "eval": cmd_eval, "oracle": cmd_oracle,
            "divergence": cmd_divergence, "markov": cmd_markov, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-lab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--out", default=f"out/{name}")
        sp.add_argument("--config", default=None, help="JSON file with section overrides")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "unlearn", "eval", "oracle"):
            sp.add_argument("--data", default=None, help="dataset.csv written by gen")
        if name in ("unlearn", "eval", "oracle"):
            sp.add_argument("--model", default=None, help="model.json written by train")
        if name == "report":
            sp.add_argument("runs", nargs="*")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(rest, args.config)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UnlearnLabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
