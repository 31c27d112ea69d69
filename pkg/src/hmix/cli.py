"""Command-line front end: gen-data, train, eval, sweep, plot.

Config precedence is CLI flag > config-file value > built-in default;
the merged dict is what gets validated, hashed, written into the output
directory, and embedded in checkpoints. Every command is deterministic
given --seed. Exit codes: 0 success, 1 bad input or config, 2 runtime
failure. HMIX_LOG={error,warn,info,debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .aggregate import aggregate
from .data import (SCENE_CSV_HEADER, IntersectionConfig, feature_dim,
                   features_and_targets, load_csv_scenes, load_toy_csv,
                   read_manifest, synth_intersection, toy_dataset, toy_sample,
                   write_manifest, write_scene_csv, write_toy_csv)
from .errors import ConfigError, HmixError, ParseError
from .layers import resolve_width
from .losses import LossConfig
from .metrics import MetricReport, evaluate_forecasts, metrics_table, write_metrics_csv
from .mixture import write_forecast_csv, read_forecast_csv
from .models import (EnsembleSpec, HeadSpec, MLPForecaster, TransformerConfig,
                     build_ensemble)
from .plots import sweep_chart, toy_mode_panels, trajectory_figure
from .tensor import Tensor
from .training import (TrainConfig, config_hash, load_checkpoint, train,
                       train_deep)

log = logging.getLogger("hmix")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}

# config keys that may come from a file or a flag; anything else in a
# config file is a typo and gets rejected
DEFAULTS: dict = {
    "seed": 0,
    "model": None,            # mlp | transformer; default picked from the dataset kind
    "kstar": 2,
    "kprime": 3,
    "hidden": 50,
    "base_dim": 32,
    "heads": 2,
    "blocks": 2,
    "ensemble": "single",     # single | packed | deep
    "members": 1,
    "alpha": 1.0,
    "loss": "hwta",           # wta | eps_wta | ewta | hwta
    "gamma": 0.6,
    "epsilon": 0.05,
    "ewta_n_init": 6,
    "ewta_milestones": [],
    "winner_metric": "nll",
    "normalized_meta_stats": False,
    "kl_snapshot": "batch",
    "use_kl_terms": True,
    "epochs": 10,
    "batch_size": 128,
    "lr": 7.5e-4,
    "lr_milestones": [],
    "lr_decay": 0.5,
    "clip_norm": 5.0,
    "val_fraction": 0.1,
    "n_neighbors": 5,
}


def setup_logging() -> None:
    name = os.environ.get("HMIX_LOG", "info").lower()
    if name not in _LOG_LEVELS:
        print(f"hmix: ignoring unknown HMIX_LOG={name!r}", file=sys.stderr)
        name = "info"
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(_LOG_LEVELS[name])


class Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; our contract reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def merged_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: {e}") from e
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"config file {args.config}: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def validate_run_config(cfg: dict) -> tuple[LossConfig, TrainConfig, EnsembleSpec]:
    """Construct every typed config up front so bad values fail before compute."""
    if cfg["model"] not in (None, "mlp", "transformer"):
        raise ConfigError(f"unknown model {cfg['model']!r}")
    if cfg["loss"] not in ("wta", "eps_wta", "ewta", "hwta"):
        raise ConfigError(f"unknown loss {cfg['loss']!r}")
    loss_cfg = LossConfig(
        kind=cfg["loss"], gamma=cfg["gamma"], epsilon=cfg["epsilon"],
        ewta_n_init=cfg["ewta_n_init"], ewta_milestones=tuple(cfg["ewta_milestones"]),
        winner_metric=cfg["winner_metric"],
        normalized_meta_stats=cfg["normalized_meta_stats"],
        use_kl_terms=cfg["use_kl_terms"])
    tcfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        lr_milestones=tuple(cfg["lr_milestones"]), lr_decay=cfg["lr_decay"],
        clip_norm=cfg["clip_norm"], seed=cfg["seed"], kl_snapshot=cfg["kl_snapshot"])
    spec = EnsembleSpec(style=cfg["ensemble"], members=cfg["members"], alpha=cfg["alpha"])
    if not 0.0 < cfg["val_fraction"] < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {cfg['val_fraction']}")
    if cfg["kstar"] < 1 or cfg["kprime"] < 1:
        raise ConfigError("kstar and kprime must be at least 1")
    return loss_cfg, tcfg, spec


# -- dataset plumbing --------------------------------------------------------

def _manifest_path(data_path: str) -> str:
    root, _ = os.path.splitext(data_path)
    return root + ".manifest.json"


def load_dataset(path: str, n_neighbors: int):
    """Sniff the CSV kind by header; returns (kind, x, y, info dict)."""
    if not os.path.exists(path):
        raise ConfigError(f"dataset not found: {path}")
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    if header == "t,x,y":
        x, y = load_toy_csv(path)
        return "toy", x, y, {"t_pred": 1, "in_dim": 1}
    if header == ",".join(SCENE_CSV_HEADER):
        mpath = _manifest_path(path)
        if not os.path.exists(mpath):
            raise ConfigError(
                f"scene dataset {path} needs its manifest ({mpath}) to recover t_obs")
        manifest = read_manifest(mpath)
        t_obs = int(manifest["t_obs"])
        scenes = load_csv_scenes(path, t_obs=t_obs)
        if not scenes:
            raise ConfigError(f"dataset {path}: no usable scenes")
        x, y = features_and_targets(scenes, n_neighbors=n_neighbors)
        info = {"t_obs": t_obs, "t_pred": int(y.shape[1]),
                "in_dim": feature_dim(n_neighbors), "scenes": scenes}
        return "intersection", x, y, info
    raise ParseError(f"{path}: unrecognized header {header!r}")


def split_train_val(x, y, val_fraction: float, seed: int):
    # dedicated stream so the split never aliases the training shuffle
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
    perm = rng.permutation(len(x))
    n_val = max(1, int(round(len(x) * val_fraction)))
    if n_val >= len(x):
        raise ConfigError(f"val_fraction {val_fraction} leaves no training data")
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return (x[train_idx], y[train_idx]), (x[val_idx], y[val_idx])


def build_model(cfg: dict, kind: str, info: dict):
    """Model from the merged config plus dataset geometry."""
    model_name = cfg["model"] or ("mlp" if kind == "toy" else "transformer")
    head = HeadSpec(n_meta=cfg["kstar"], n_sub=cfg["kprime"], t_pred=int(info["t_pred"]))
    spec = EnsembleSpec(style=cfg["ensemble"], members=cfg["members"], alpha=cfg["alpha"])
    if model_name == "mlp":
        if kind != "toy":
            raise ConfigError("the mlp model expects the toy dataset (t,x,y rows)")
        if spec.style != "single":
            raise ConfigError("packed/deep ensembles need --model transformer")
        return MLPForecaster(in_dim=int(info["in_dim"]), head=head,
                             hidden=cfg["hidden"], seed=cfg["seed"])
    if kind != "intersection":
        raise ConfigError("the transformer model expects a scene dataset")
    base = TransformerConfig(in_features=feature_dim(cfg["n_neighbors"]),
                             t_obs=int(info["t_obs"]), head=head,
                             base_dim=cfg["base_dim"], heads=cfg["heads"],
                             n_blocks=cfg["blocks"])
    model = build_ensemble(spec, base, seed=cfg["seed"])
    if spec.style == "packed":
        width = resolve_width(cfg["base_dim"], spec.alpha, spec.members, cfg["heads"]).dim
        log.info("packed ensemble: base_dim=%d alpha=%g members=%d -> resolved width %d",
                 cfg["base_dim"], spec.alpha, spec.members, width)
    return model


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = args.out
    if os.path.exists(out) and not args.force:
        raise ConfigError(f"output {out} exists; pass --force to overwrite")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if args.dataset == "toy":
        if args.n < 1:
            raise ConfigError(f"--n must be positive, got {args.n}")
        samples = toy_dataset(args.n, rng)
        write_toy_csv(out, samples)
        write_manifest(_manifest_path(out), {"kind": "toy", "n": args.n, "seed": seed})
        log.info("wrote %d toy samples to %s", args.n, out)
    else:
        if args.scenes < 1:
            raise ConfigError(f"--scenes must be positive, got {args.scenes}")
        try:
            probs = tuple(float(p) for p in args.probs.split(","))
        except ValueError as e:
            raise ConfigError(f"--probs must be three comma-separated numbers: {e}") from e
        if len(probs) != 3:
            raise ConfigError(f"--probs needs exactly three values, got {len(probs)}")
        icfg = IntersectionConfig(t_obs=args.t_obs, t_pred=args.t_pred,
                                  branch_probs=probs, noise_std=args.noise_std,
                                  n_neighbors=args.n_neighbors)
        scenes = synth_intersection(args.scenes, rng, icfg)
        write_scene_csv(out, scenes)
        write_manifest(_manifest_path(out), {
            "kind": "intersection", "scenes": args.scenes, "seed": seed,
            "probs": list(probs), "t_obs": icfg.t_obs, "t_pred": icfg.t_pred,
            "noise_std": icfg.noise_std, "n_neighbors": icfg.n_neighbors})
        log.info("wrote %d scenes to %s", args.scenes, out)
    return 0


def _prepare_out_dir(out: str, cfg: dict, force: bool) -> str:
    marker = os.path.join(out, "config.json")
    if os.path.exists(marker) and not force:
        raise ConfigError(f"{marker} exists; pass --force to overwrite the run")
    os.makedirs(out, exist_ok=True)
    with open(marker, "w") as fh:
        json.dump({**cfg, "config_hash": config_hash(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return marker


def cmd_train(args) -> int:
    cfg = merged_config(args)
    loss_cfg, tcfg, spec = validate_run_config(cfg)
    if args.out is None:
        raise ConfigError("train needs --out for logs and checkpoints")
    kind, x, y, info = load_dataset(args.data, cfg["n_neighbors"])
    if cfg["loss"] == "hwta" and cfg["kstar"] < 2:
        log.warning("hwta with kstar=1 degenerates to a flat mixture")
    model = build_model(cfg, kind, info)
    cfg["model"] = cfg["model"] or ("mlp" if kind == "toy" else "transformer")
    _prepare_out_dir(args.out, cfg, args.force)
    train_data, val_data = split_train_val(x, y, cfg["val_fraction"], cfg["seed"])
    log.info("training %s on %d samples (%d validation)",
             cfg["model"], len(train_data[0]), len(val_data[0]))
    if spec.style == "deep":
        results = train_deep(model, train_data, val_data, loss_cfg, tcfg,
                             out_dir=args.out, run_config=cfg)
        best = min(r.best_val for r in results)
        print(f"trained {len(results)} members; best member val mADE_1 {best:.4f}")
    else:
        result = train(model, train_data, val_data, loss_cfg, tcfg,
                       out_dir=args.out, run_config=cfg)
        print(f"best epoch {result.best_epoch} val mADE_1 {result.best_val:.4f}")
        print(f"checkpoints: {result.best_path} {result.final_path}")
    return 0


def _scene_forecasts(model, x, chunk: int = 256):
    """Per-scene unbatched member forecasts, [scene][member]."""
    out = []
    for lo in range(0, len(x), chunk):
        members = model.forward(x[lo:lo + chunk])
        n = len(x[lo:lo + chunk])
        for i in range(n):
            per_scene = []
            for h in members:
                per_scene.append(type(h)(Tensor(h.mus.data[i]), Tensor(h.bs.data[i]),
                                         weights=Tensor(h.weights.data[i])))
            out.append(per_scene)
    return out


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_checkpoint(args.checkpoint)
    run_cfg = meta["config"].get("run", {})
    n_neighbors = run_cfg.get("n_neighbors", DEFAULTS["n_neighbors"])
    kind, x, y, info = load_dataset(args.data, n_neighbors)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    scene_fcs = _scene_forecasts(model, x)
    ids = [s.scene_id for s in info.get("scenes", [])] or [f"{i:06d}" for i in range(len(x))]

    methods = ["raw"] + (args.aggregate or [])
    reports: dict[str, MetricReport] = {}
    for method in methods:
        if method == "raw":
            pairs = [(y[i], members[0] if len(members) == 1 else aggregate(members, "topk"))
                     for i, members in enumerate(scene_fcs)]
            tag = "raw" if model.members == 1 else "raw_topk"
        else:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(args.seed or 0)))
            pairs = [(y[i], aggregate(members, method, rng=rng))
                     for i, members in enumerate(scene_fcs)]
            tag = method
        reports[tag] = evaluate_forecasts(pairs, n_params=model.param_count(),
                                          macs=model.mac_count())
        if args.out and args.dump_forecasts:
            dump = [(ids[i], fc) for i, (_, fc) in enumerate(pairs)]
            # aggregated forecasts dump as flat mixtures
            dump = [(sid, fc.to_mixture() if hasattr(fc, "to_mixture") else fc)
                    for sid, fc in dump]
            write_forecast_csv(os.path.join(args.out, f"forecasts_{tag}.csv"), dump)

    table = metrics_table(reports)
    print(table)
    if args.out:
        rows = [{"forecast": tag, **rep.row()} for tag, rep in reports.items()]
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
        with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
            fh.write(table + "\n")
    return 0


# -- sweep -------------------------------------------------------------------

_SWEEP_METRICS = ["made_1", "made_6", "mfde_1", "mfde_6", "nll_3", "nll_6"]


def _parse_grid(specs: list[str]) -> list[tuple[str, list]]:
    grid = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--grid needs key=v1,v2,... got {spec!r}")
        key, _, vals = spec.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"--grid key {key!r} is not a config key")
        values = []
        for item in vals.split(","):
            item = item.strip()
            if item == "":
                continue
            try:
                values.append(json.loads(item))
            except json.JSONDecodeError:
                values.append(item)
        if not values:
            raise ConfigError(f"--grid {key}: empty value list")
        grid.append((key, values))
    if not grid:
        raise ConfigError("sweep needs at least one --grid key=values")
    if len(grid) > 2:
        raise ConfigError("sweep supports at most two swept keys")
    return grid


def _run_sweep_cell(task: dict) -> dict:
    """One (cell, seed) training + evaluation; returns a long-format row."""
    cfg = task["cfg"]
    loss_cfg, tcfg, spec = validate_run_config(cfg)
    kind, x, y, info = load_dataset(task["data"], cfg["n_neighbors"])
    model = build_model(cfg, kind, info)
    train_data, val_data = split_train_val(x, y, cfg["val_fraction"], cfg["seed"])
    os.makedirs(task["cell_dir"], exist_ok=True)
    if spec.style == "deep":
        train_deep(model, train_data, val_data, loss_cfg, tcfg,
                   out_dir=task["cell_dir"], run_config=cfg)
    else:
        train(model, train_data, val_data, loss_cfg, tcfg,
              out_dir=task["cell_dir"], run_config=cfg)
    xv, yv = val_data
    fcs = _scene_forecasts(model, xv)
    pairs = [(yv[i], members[0] if len(members) == 1 else aggregate(members, "topk"))
             for i, members in enumerate(fcs)]
    rep = evaluate_forecasts(pairs, n_params=model.param_count(), macs=model.mac_count())
    row = {k: v for k, v in task["point"].items()}
    row["seed"] = cfg["seed"]
    row.update({m: getattr(rep, m) for m in _SWEEP_METRICS})
    row["n_params"] = rep.n_params
    return row


def cmd_sweep(args) -> int:
    base_cfg = merged_config(args)
    grid = _parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base_cfg["seed"]]
    if args.out is None:
        raise ConfigError("sweep needs --out")
    os.makedirs(args.out, exist_ok=True)

    points: list[dict] = [{}]
    for key, values in grid:
        points = [{**p, key: v} for p in points for v in values]

    results_path = os.path.join(args.out, "results.csv")
    done: set[tuple] = set()
    rows: list[dict] = []
    if os.path.exists(results_path):
        with open(results_path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append(row)
                done.add(tuple(str(row[k]) for k, _ in grid) + (str(row["seed"]),))
        if done:
            log.info("resuming sweep: %d cells already recorded", len(done))

    tasks = []
    for point in points:
        for seed in seeds:
            key = tuple(str(v) for v in point.values()) + (str(seed),)
            if key in done:
                continue
            cfg = dict(base_cfg)
            cfg.update(point)
            cfg["seed"] = seed
            # validate every cell before any training starts
            validate_run_config(cfg)
            cell = "_".join(f"{k}={v}" for k, v in point.items()) + f"_seed{seed}"
            tasks.append({"cfg": cfg, "data": args.data, "point": point,
                          "cell_dir": os.path.join(args.out, cell)})

    jobs = args.jobs or 1
    if jobs > 1 and tasks:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            new_rows = list(pool.map(_run_sweep_cell, tasks))
    else:
        new_rows = [_run_sweep_cell(t) for t in tasks]

    fieldnames = [k for k, _ in grid] + ["seed"] + _SWEEP_METRICS + ["n_params"]
    for row in new_rows:
        write_header = not os.path.exists(results_path) or os.path.getsize(results_path) == 0
        with open(results_path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            if write_header:
                writer.writeheader()
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
    rows.extend(new_rows)

    x_key = grid[0][0]
    series_key = grid[1][0] if len(grid) > 1 else None
    for metric in _SWEEP_METRICS:
        plot_rows = [r for r in rows if r.get(metric) not in (None, "")]
        if plot_rows:
            sweep_chart(plot_rows, x_key, metric,
                        os.path.join(args.out, f"sweep_{metric}.svg"),
                        series_key=series_key)
    print(f"sweep complete: {len(rows)} rows in {results_path}")
    return 0


# -- plot --------------------------------------------------------------------

def cmd_plot(args) -> int:
    if args.out is None:
        raise ConfigError("plot needs --out")
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    if args.what == "toy":
        if not args.checkpoint or not os.path.exists(args.checkpoint):
            raise ConfigError(f"plot toy needs --checkpoint, got {args.checkpoint!r}")
        model, _ = load_checkpoint(args.checkpoint)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        forecasts, samples = {}, {}
        for t in (0.0, 0.5, 1.0):
            h = model.forward(np.array([[t]]))[0]
            forecasts[t] = type(h)(Tensor(h.mus.data[0]), Tensor(h.bs.data[0]),
                                   weights=Tensor(h.weights.data[0]))
            samples[t] = np.stack([toy_sample(t, rng).point for _ in range(400)])
        path = os.path.join(args.out, "toy_modes.svg")
        toy_mode_panels(forecasts, samples, path)
        print(f"wrote {path}")
        return 0
    if not args.dump or not os.path.exists(args.dump):
        raise ConfigError(f"plot trajectories needs --dump, got {args.dump!r}")
    forecasts = read_forecast_csv(args.dump)
    if not forecasts:
        raise ConfigError(f"{args.dump}: no forecasts")
    for scene_id in sorted(forecasts)[:args.max_scenes]:
        path = os.path.join(args.out, f"trajectories_{scene_id}.svg")
        trajectory_figure(forecasts[scene_id], path)
        print(f"wrote {path}")
    return 0


# -- parser ------------------------------------------------------------------

def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--force", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="hmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV + manifest")
    g.add_argument("dataset", choices=["toy", "intersection"])
    g.add_argument("--n", type=int, default=50000, help="toy sample count")
    g.add_argument("--scenes", type=int, default=1000)
    g.add_argument("--probs", default="0.5,0.25,0.25",
                   help="straight,left,right branch probabilities")
    g.add_argument("--t-obs", type=int, default=10)
    g.add_argument("--t-pred", type=int, default=12)
    g.add_argument("--noise-std", type=float, default=0.05)
    g.add_argument("--n-neighbors", type=int, default=5)
    _add_shared(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a forecaster on a dataset CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=["mlp", "transformer"], default=None)
    t.add_argument("--loss", choices=["wta", "eps_wta", "ewta", "hwta"], default=None)
    t.add_argument("--gamma", type=float, default=None)
    t.add_argument("--epsilon", type=float, default=None)
    t.add_argument("--kstar", type=int, default=None)
    t.add_argument("--kprime", type=int, default=None)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--base-dim", dest="base_dim", type=int, default=None)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--blocks", type=int, default=None)
    t.add_argument("--ensemble", choices=["single", "packed", "deep"], default=None)
    t.add_argument("--members", type=int, default=None)
    t.add_argument("--alpha", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    _add_shared(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--aggregate", action="append", default=None,
                   choices=["topk", "rip", "rip_min", "kmeans", "meta"])
    e.add_argument("--dump-forecasts", action="store_true")
    _add_shared(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train/eval over a 1-2 key hyperparameter grid")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", action="append", default=[],
                   help="key=v1,v2,... (repeat for a second key)")
    s.add_argument("--seeds", default=None, help="comma-separated seed list")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--loss", choices=["wta", "eps_wta", "ewta", "hwta"], default=None)
    s.add_argument("--model", choices=["mlp", "transformer"], default=None)
    s.add_argument("--kstar", type=int, default=None)
    s.add_argument("--kprime", type=int, default=None)
    s.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    _add_shared(s)
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render SVG figures from a checkpoint or dump")
    p.add_argument("what", choices=["toy", "trajectories"])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dump", default=None, help="forecast CSV from eval --dump-forecasts")
    p.add_argument("--max-scenes", type=int, default=4)
    _add_shared(p)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as e:
        print(f"hmix: {e}", file=sys.stderr)
        return 1
    except HmixError as e:
        print(f"hmix: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"hmix: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
