"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every command writes only inside ``--out`` and leaves a ``manifest.json``
there whose ``config`` section can be passed back through ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import generate_sbm
from .graph import SYM_NORM, Graph, build_graph, check_contraction, load_graph, save_graph
from .mixture import em_fit_bmm, em_fit_gmm, log_likelihood, normalize_minmax
from .nn import save_checkpoint
from .probe import linear_probe
from .training import (FROZEN_MATRIX_MAX_N, TrainConfig, train_inductive,
                       train_transductive)

log = logging.getLogger("progcl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MAX_SWEEP_CELLS = 200
SWEEP_KEYS = ("mode", "N_prime", "m", "E", "w_init", "I", "M_prime")

TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
SBM_DEFAULTS = {"blocks": 3, "nodes_per_block": 100, "p_in": 0.1, "p_out": 0.01,
                "feature_dim": 16, "class_sep": 1.0}
RUN_DEFAULTS = {"dataset": "sbm", "edges": None, "features": None, "labels": None,
                "inductive": False, "record_time": False,
                "probe_runs": 20, "probe_l2": 1e-3, "train_frac": 0.1}


class UsageError(Exception):
    """Bad input or configuration; maps to exit code 2."""


# -- config handling ---------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    """Load a JSON object or ``key=value`` lines; a manifest's ``config`` is unwrapped."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        return dict(data.get("config", data)) if "manifest_version" in data else data
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _fanouts(text):
    if text is None or str(text).lower() == "none":
        return None
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(","))


def resolve(args, defaults: dict) -> dict:
    """Defaults, then the config file, then flags given on the command line."""
    settings = dict(defaults)
    if getattr(args, "config", None):
        from_file = read_config(args.config)
        unknown = set(from_file) - set(settings) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        settings.update(from_file)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    if "neighbor_fanouts" in settings:
        settings["neighbor_fanouts"] = _fanouts(settings["neighbor_fanouts"])
    return settings


def train_config(settings: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({k: settings[k] for k in TRAIN_FIELDS}).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# -- output helpers ------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs=(), outputs=()) -> None:
    manifest = {
        "manifest_version": 1,
        "artifact_version": __version__,
        "command": command,
        "seed": config.get("seed"),
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": sorted(str(p) for p in outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _dump_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# -- graph sources -----------------------------------------------------------

def load_dataset(settings: dict):
    """Return ``(graph, input_paths)`` for the configured dataset."""
    if settings["dataset"] == "sbm":
        g = generate_sbm(settings["blocks"], settings["nodes_per_block"], settings["p_in"],
                         settings["p_out"], settings["feature_dim"], settings["class_sep"],
                         seed=settings["seed"])
        return g, []
    if settings["dataset"] != "files":
        raise UsageError(f"unknown dataset {settings['dataset']!r}; expected sbm or files")
    paths = [_require(settings["edges"], "edge file"), _require(settings["features"], "feature file")]
    if settings["labels"] is not None:
        paths.append(_require(settings["labels"], "label file"))
    try:
        g = load_graph(*paths)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return g, paths


def _preset_graph(name: str, feature_dim: int, rng) -> Graph:
    name = name.lower()
    if name == "two-triangles":
        edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]
        n = 6
    elif name[:1] == "k" and name[1:].isdigit():
        n = int(name[1:])
        edges = list(itertools.combinations(range(n), 2))
    elif name.startswith("cycle") and name[5:].isdigit():
        n = int(name[5:])
        edges = [(i, (i + 1) % n) for i in range(n)]
    elif name.startswith("path") and name[4:].isdigit():
        n = int(name[4:])
        edges = [(i, i + 1) for i in range(n - 1)]
    else:
        raise UsageError(f"unknown preset {name!r}; use kN, cycleN, pathN or two-triangles")
    return build_graph(edges, rng.standard_normal((n, feature_dim)), n_nodes=n)


# -- commands ----------------------------------------------------------------

def run_training(settings: dict):
    """Train and probe one configuration; returns (result, graph, probe, paths)."""
    g, inputs = load_dataset(settings)
    cfg = train_config(settings)
    if not settings["inductive"] and cfg.posterior == "frozen-matrix" and g.n_nodes > FROZEN_MATRIX_MAX_N:
        warnings.warn(f"n={g.n_nodes} > {FROZEN_MATRIX_MAX_N}: using frozen-model posteriors",
                      stacklevel=2)
        cfg = dataclasses.replace(cfg, posterior="frozen-model")
    run = train_inductive if settings["inductive"] else train_transductive
    res = run(g, cfg, record_time=settings["record_time"])
    emb = res.model.embed(g).data
    probe = None
    if g.labels is not None:
        probe = linear_probe(emb, g.labels, l2=settings["probe_l2"], runs=settings["probe_runs"],
                             train_frac=settings["train_frac"], seed=cfg.seed)
    return res, g, emb, probe, inputs


def cmd_train(args) -> int:
    settings = resolve(args, {**TrainConfig().to_dict(), **SBM_DEFAULTS, **RUN_DEFAULTS})
    out = _out_dir(args)
    res, g, emb, probe, inputs = run_training(settings)
    records = list(res.records)
    if probe is not None:
        records.append({"probe_acc_mean": probe["acc_mean"], "probe_acc_std": probe["acc_std"],
                        "probe_f1_mean": probe["f1_mean"], "probe_f1_std": probe["f1_std"]})
    outputs = [out / "metrics.jsonl", out / "checkpoint.json", out / "embeddings.npy"]
    _dump_jsonl(out / "metrics.jsonl", records)
    save_checkpoint(out / "checkpoint.json", res.model.parameters(),
                    {"config": res.config.to_dict(), "fallback": res.fallback})
    np.save(out / "embeddings.npy", emb)
    if res.histograms:
        outputs.append(out / "histograms.csv")
        with (out / "histograms.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "bin_left", "bin_right", "true_negatives", "false_negatives"])
            for epoch, h in res.histograms:
                for b in range(len(h["true"])):
                    w.writerow([epoch, repr(float(h["edges"][b])), repr(float(h["edges"][b + 1])),
                                int(h["true"][b]), int(h["false"][b])])
    if res.store.frozen_bmm is not None:
        outputs.append(out / "bmm.json")
        (out / "bmm.json").write_text(json.dumps(res.store.frozen_bmm.to_dict(), indent=2) + "\n")
    settings["posterior"] = res.config.posterior
    write_manifest(out, "train", settings, inputs, outputs)
    if probe is not None:
        print(f"probe accuracy {probe['acc_mean']:.4f} +- {probe['acc_std']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _read_values(path: Path) -> np.ndarray:
    try:
        values = np.genfromtxt(path, delimiter=",", dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    values = np.atleast_1d(values).ravel()
    return values[np.isfinite(values)]


def cmd_fit_bmm(args) -> int:
    settings = resolve(args, {"input": None, "w_init": 0.05, "I": 10, "bins": 50})
    path = _require(settings["input"], "similarity file")
    raw = _read_values(path)
    if raw.size < 4:
        raise UsageError(f"{path}: need at least 4 similarity values, got {raw.size}")
    try:
        sample = normalize_minmax(raw)
        bmm = em_fit_bmm(sample, settings["w_init"], settings["I"])
        gmm = em_fit_gmm(sample, settings["w_init"], settings["I"])
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    s = sample.values
    out = _out_dir(args)
    report = {**bmm.to_dict(), "loglik": log_likelihood(bmm, s),
              "norm_min": sample.norm_min, "norm_max": sample.norm_max, "n": int(s.size),
              "gmm": gmm.to_dict(), "loglik_gmm": log_likelihood(gmm, s)}
    (out / "bmm.json").write_text(json.dumps(_jsonable(report), indent=2) + "\n")
    edges = np.linspace(0.0, 1.0, settings["bins"] + 1)
    density, _ = np.histogram(s, bins=edges, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    bmm_d = np.exp(bmm.component_logpdf(centers)) @ bmm.lam
    gmm_d = np.exp(gmm.component_logpdf(centers)) @ gmm.lam
    with (out / "overlay.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "empirical_density", "bmm_density", "gmm_density"])
        for row in zip(centers, density, bmm_d, gmm_d):
            w.writerow([repr(float(x)) for x in row])
    write_manifest(out, "fit-bmm", settings, [path], [out / "bmm.json", out / "overlay.csv"])
    print(f"loglik bmm {report['loglik']:.4f}  gmm {report['loglik_gmm']:.4f}")
    return EXIT_OK


def cmd_check_theorem(args) -> int:
    settings = resolve(args, {**SBM_DEFAULTS, "edges": None, "features": None, "preset": None,
                              "sbm": False, "tau": 50, "seed": 0})
    rng = np.random.default_rng(settings["seed"])
    inputs = []
    if settings["preset"]:
        g = _preset_graph(settings["preset"], settings["feature_dim"], rng)
    elif settings["sbm"]:
        g = generate_sbm(settings["blocks"], settings["nodes_per_block"], settings["p_in"],
                         settings["p_out"], settings["feature_dim"], settings["class_sep"],
                         seed=settings["seed"])
    else:
        inputs = [_require(settings["edges"], "edge file"),
                  _require(settings["features"], "feature file")]
        try:
            g = load_graph(*inputs)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    report = check_contraction(g, g.features, tau=int(settings["tau"]))
    report["operator"] = SYM_NORM
    out = _out_dir(args)
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2) + "\n")
    write_manifest(out, "check-theorem", settings, inputs, [out / "report.json"])
    print(json.dumps({k: report[k] for k in ("connected", "bipartite_with_self_loops",
                                             "preconditions_met", "max_pair_ratio")}))
    return EXIT_OK


def _sweep_cell(task):
    settings, seeds = task
    accs = []
    for seed in seeds:
        _, _, _, probe, _ = run_training({**settings, "seed": seed})
        if probe is None:
            raise UsageError("sweep needs a labelled dataset")
        accs.append(probe["acc_mean"])
    return accs


def _grid(specs) -> dict:
    grid = {}
    for spec in specs or []:
        if "=" not in spec:
            raise UsageError(f"grid entry {spec!r} must look like key=v1,v2")
        key, values = spec.split("=", 1)
        if key not in SWEEP_KEYS:
            raise UsageError(f"cannot sweep {key!r}; choose from {', '.join(SWEEP_KEYS)}")
        grid[key] = [_parse_value(v) for v in values.split(",") if v]
    return grid


def cmd_sweep(args) -> int:
    settings = resolve(args, {**TrainConfig().to_dict(), **SBM_DEFAULTS, **RUN_DEFAULTS})
    grid = _grid(args.grid)
    seeds = [int(s) for s in str(args.seeds).split(",")]
    keys = sorted(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    if len(cells) > MAX_SWEEP_CELLS and not args.force:
        raise UsageError(f"grid has {len(cells)} cells (> {MAX_SWEEP_CELLS}); pass --force")
    for cell in cells:
        train_config({**settings, **cell})
    tasks = [({**settings, **cell}, seeds) for cell in cells]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]
    rows = []
    for cell, accs in zip(cells, results):
        key = ";".join(f"{k}={cell[k]}" for k in keys)
        rows.append([key, *[cell[k] for k in keys], repr(float(np.mean(accs))),
                     repr(float(np.std(accs))), len(accs)])
    rows.sort(key=lambda r: r[0])
    out = _out_dir(args)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", *keys, "acc_mean", "acc_std", "n_seeds"])
        w.writerows(rows)
    write_manifest(out, "sweep", {**settings, "grid": grid, "seeds": seeds}, [], [out / "sweep.csv"])
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_gen_sbm(args) -> int:
    settings = resolve(args, {**SBM_DEFAULTS, "seed": 0})
    g = generate_sbm(settings["blocks"], settings["nodes_per_block"], settings["p_in"],
                     settings["p_out"], settings["feature_dim"], settings["class_sep"],
                     seed=settings["seed"])
    out = _out_dir(args)
    paths = [out / "edges.txt", out / "features.csv", out / "labels.txt"]
    save_graph(g, *paths)
    write_manifest(out, "gen-sbm", settings, [], paths)
    print(f"wrote {g.n_nodes} nodes, {g.n_edges} edges to {out}")
    return EXIT_OK


def _load_matrix(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def cmd_probe(args) -> int:
    settings = resolve(args, {"embeddings": None, "labels": None, "probe_runs": 20,
                              "probe_l2": 1e-3, "train_frac": 0.1, "seed": 0})
    emb_path = _require(settings["embeddings"], "embedding file")
    lab_path = _require(settings["labels"], "label file")
    emb = _load_matrix(emb_path)
    labels = np.loadtxt(lab_path, dtype=np.int64, ndmin=1)
    if labels.shape[0] != emb.shape[0]:
        raise UsageError(f"{labels.shape[0]} labels for {emb.shape[0]} embeddings")
    try:
        res = linear_probe(emb, labels, l2=settings["probe_l2"], runs=settings["probe_runs"],
                           train_frac=settings["train_frac"], seed=settings["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    (out / "probe.json").write_text(json.dumps(res, indent=2) + "\n")
    write_manifest(out, "probe", settings, [emb_path, lab_path], [out / "probe.json"])
    print(f"accuracy {res['acc_mean']:.4f} +- {res['acc_std']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="run seed")
    parser.add_argument("--out", default=argparse.SUPPRESS if suppress else "progcl_out",
                        help="output directory")
    parser.add_argument("--config", default=default,
                        help="JSON object, key=value file or a previous manifest.json")


def _train_flags(parser) -> None:
    for name, f in TRAIN_FIELDS.items():
        if name == "seed":
            continue
        flag = "--" + name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, dest=name, action="store_const", const=True, default=None)
        elif name == "neighbor_fanouts":
            parser.add_argument(flag, dest=name, default=None, help="e.g. 10,10,25 or none")
        else:
            kind = {"float": float, "int": int}.get(str(f.type), str)
            parser.add_argument(flag, dest=name, type=kind, default=None)
    parser.add_argument("--dataset", choices=["sbm", "files"], default=None)
    parser.add_argument("--edges", default=None)
    parser.add_argument("--features", default=None)
    parser.add_argument("--labels", default=None)
    parser.add_argument("--inductive", action="store_const", const=True, default=None)
    parser.add_argument("--record-time", dest="record_time", action="store_const", const=True,
                        default=None, help="add wall_ms to metrics (breaks byte equality)")
    _probe_flags(parser)
    _sbm_flags(parser)


def _sbm_flags(parser) -> None:
    parser.add_argument("--blocks", type=int, default=None)
    parser.add_argument("--nodes-per-block", dest="nodes_per_block", type=int, default=None)
    parser.add_argument("--p-in", dest="p_in", type=float, default=None)
    parser.add_argument("--p-out", dest="p_out", type=float, default=None)
    parser.add_argument("--feature-dim", dest="feature_dim", type=int, default=None)
    parser.add_argument("--class-sep", dest="class_sep", type=float, default=None)


def _probe_flags(parser) -> None:
    parser.add_argument("--probe-runs", dest="probe_runs", type=int, default=None)
    parser.add_argument("--probe-l2", dest="probe_l2", type=float, default=None)
    parser.add_argument("--train-frac", dest="train_frac", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an encoder and probe it")
    _global_flags(p, suppress=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-bmm", help="fit beta and Gaussian mixtures to similarities")
    _global_flags(p, suppress=True)
    p.add_argument("input", nargs="?", default=None, help="CSV of raw similarities")
    p.add_argument("--w-init", dest="w_init", type=float, default=None)
    p.add_argument("--I", dest="I", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.set_defaults(func=cmd_fit_bmm)

    p = sub.add_parser("check-theorem", help="check distance contraction under propagation")
    _global_flags(p, suppress=True)
    p.add_argument("--preset", default=None, help="kN, cycleN, pathN or two-triangles")
    p.add_argument("--sbm", action="store_const", const=True, default=None)
    p.add_argument("--edges", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--tau", type=int, default=None, help="number of propagation steps")
    _sbm_flags(p)
    p.set_defaults(func=cmd_check_theorem)

    p = sub.add_parser("sweep", help="grid of training runs, one CSV row per cell")
    _global_flags(p, suppress=True)
    _train_flags(p)
    p.add_argument("--grid", action="append", help="key=v1,v2 (repeatable)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true", help=f"allow more than {MAX_SWEEP_CELLS} cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-sbm", help="write a stochastic block model graph")
    _global_flags(p, suppress=True)
    _sbm_flags(p)
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("probe", help="linear probe on saved embeddings")
    _global_flags(p, suppress=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--labels", default=None)
    _probe_flags(p)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
