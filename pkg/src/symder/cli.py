"""Command line front end.

    symder generate --preset lorenz --out data/lorenz --seed 0
    symder train    --data data/lorenz --out runs/lorenz
    symder eval     --data data/lorenz --run runs/lorenz
    symder predict  --data data/lorenz --run runs/lorenz
    symder report   --run runs/lorenz

Exit codes: 0 success, 1 runtime failure (divergence, bad arguments caught
late, existing output without --force), 2 missing dataset or run input,
3 corrupt checkpoint or model file.

SYMDER_THREADS limits the BLAS thread pools; it must be handled before numpy
is first imported, which is why this module sets the environment up top.
"""

import argparse
import json
import os
import sys
from pathlib import Path

if "SYMDER_THREADS" in os.environ:
    _n = os.environ["SYMDER_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

import numpy as np

from . import datagen, encoders, evaluate, library, recover, train

PRESETS_DIR = Path(__file__).resolve().parents[2] / "presets"

# fallback training schedules per system, overridable by a JSON config
DEFAULT_CONFIGS = {
    "rossler": {"steps": 50000, "lr": 1e-3, "width": 128, "order": 2,
                "alphas": [1.0, 1.0], "sparsify_every": 5000,
                "theta_threshold": 1e-3, "n_time": 2500,
                "pipeline": "staged"},
    "lorenz": {"steps": 50000, "lr": 1e-3, "width": 128, "order": 2,
               "alphas": [1.0, 1.0], "sparsify_every": 5000,
               "theta_threshold": 1e-3, "n_time": 2500,
               "pipeline": "staged"},
    "diffusion_source": {"steps": 50000, "lr": 1e-4, "width": 64, "order": 2,
                         "alphas": [1.0, 10.0], "sparsify_every": 1000,
                         "theta_threshold": 5e-3, "n_time": 1000,
                         "chunk_time": 64},
    "diffusive_lv": {"steps": 100000, "lr": 1e-3, "width": 64, "order": 2,
                     "alphas": [1.0, 1.0], "sparsify_every": 1000,
                     "theta_threshold": 2e-3, "n_time": 1000,
                     "chunk_time": 64},
    "nlse": {"steps": 100000, "lr": 1e-4, "width": 0, "order": 2,
             "alphas": [1.0, 1.0], "beta_phase": 1e3,
             "sparsify_every": 10000, "theta_threshold": 1e-3,
             "n_time": 500, "divergence_limit": 1e9},
}

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_MISSING = 2
EXIT_CORRUPT = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAIL):
        super().__init__(message)
        self.code = code


def load_config(preset_name, config_path=None):
    cfg = dict(DEFAULT_CONFIGS.get(preset_name, DEFAULT_CONFIGS["lorenz"]))
    if config_path is None:
        packaged = PRESETS_DIR / f"{preset_name}.json"
        if packaged.exists():
            config_path = packaged
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config not found: {path}", EXIT_MISSING)
        try:
            cfg.update(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise CliError(f"bad config {path}: {e}", EXIT_FAIL)
    return cfg


def load_dataset(path):
    path = Path(path)
    if not (path / "meta.json").exists():
        raise CliError(f"dataset not found: {path}", EXIT_MISSING)
    return datagen.Dataset.load(path)


def load_run(run_dir):
    run_dir = Path(run_dir)
    model_path = run_dir / "model.json"
    ckpt_path = run_dir / "encoder.ckpt"
    for p in (model_path, ckpt_path):
        if not p.exists():
            raise CliError(f"run artifact not found: {p}", EXIT_MISSING)
    try:
        model = library.SymbolicModel.from_json(model_path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CliError(f"corrupt model file {model_path}: {e}", EXIT_CORRUPT)
    try:
        encoder = encoders.load_checkpoint(ckpt_path)
    except encoders.CheckpointError as e:
        raise CliError(str(e), EXIT_CORRUPT)
    return model, encoder


# -- subcommands --------------------------------------------------------------

def cmd_generate(args):
    try:
        preset = datagen.get_preset(args.preset, n_time=args.n_time,
                                    nx=args.nx)
    except KeyError:
        raise CliError(f"unknown preset {args.preset!r}", EXIT_FAIL)
    ds = datagen.simulate(preset, seed=args.seed)
    try:
        ds.save(args.out, force=args.force)
    except FileExistsError:
        raise CliError(f"{args.out} exists; pass --force to overwrite",
                       EXIT_FAIL)
    print(f"wrote {args.out}: {preset.name}, visible shape "
          f"{ds.visible.shape}, seed {args.seed}")
    return EXIT_OK


def cmd_train(args):
    ds = load_dataset(args.data)
    cfg = load_config(ds.preset.name, args.config)
    if args.steps is not None:
        cfg["steps"] = args.steps
    if args.width is not None:
        cfg["width"] = args.width
    if args.lr is not None:
        cfg["lr"] = args.lr
    if cfg.get("pipeline") == "staged" and ds.preset.kind == "ode":
        return _train_staged(args, ds, cfg)
    model = train.default_model(ds.preset, seed=args.seed)
    enc = train.default_encoder(ds, width=cfg["width"] or None,
                                seed=args.seed)
    prob = train.Problem(ds, model, enc, order=cfg["order"],
                         alphas=tuple(cfg["alphas"]),
                         beta_phase=cfg.get("beta_phase", 0.0))
    tcfg = train.TrainConfig(
        steps=cfg["steps"], lr=cfg["lr"],
        optimizer=cfg.get("optimizer", "adabelief"),
        order=cfg["order"], alphas=tuple(cfg["alphas"]),
        beta_phase=cfg.get("beta_phase", 0.0),
        sparsify_every=cfg["sparsify_every"],
        theta_threshold=cfg["theta_threshold"],
        divergence_limit=cfg.get("divergence_limit",
                                 train.DIVERGENCE_LIMIT),
        chunk_time=cfg.get("chunk_time", 0),
        batch_time=cfg.get("batch_time", 0),
        lr_final=cfg.get("lr_final"), seed=args.seed)
    try:
        train.fit(prob, tcfg, out_dir=args.out, log=print)
    except train.TrainingDiverged as e:
        raise CliError(f"training diverged: {e}", EXIT_FAIL)
    print(f"wrote {args.out}: {model.active_terms()} active terms")
    return EXIT_OK


def _train_staged(args, ds, cfg):
    """ODE systems: free-embedding recovery with staged support selection.
    `--steps` below 20000 selects the reduced budget; `--width` additionally
    distills the embedding into a temporal-conv encoder of that width."""
    reduced = cfg["steps"] is not None and cfg["steps"] < 20000
    if reduced:
        rcfg = recover.RecoveryConfig.reduced(seed=args.seed)
    else:
        rcfg = recover.RecoveryConfig(seed=args.seed)
    rec = recover.EmbeddingRecovery(ds, train.default_model(ds.preset,
                                                            seed=args.seed),
                                    rcfg)
    res = rec.fit()
    enc = res.encoder
    if args.width:
        enc = recover.distill(rec, width=args.width, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "model.json").write_text(rec.model.to_json())
    encoders.save_checkpoint(enc, out_dir / "encoder.ckpt")
    (out_dir / "config.json").write_text(json.dumps(
        {"pipeline": "staged", "reduced": reduced, "seed": args.seed,
         "loss": res.loss, "history": res.history}, indent=1))
    print(f"wrote {args.out}: {rec.model.active_terms()} active terms "
          f"(staged, loss {res.loss:.3g})")
    return EXIT_OK


def cmd_eval(args):
    ds = load_dataset(args.data)
    model, encoder = load_run(args.run)
    res = evaluate.evaluate_run(ds, model, encoder)
    extra = {}
    if "phase_error" in res:
        extra = {"phase_error": res["phase_error"],
                 "phase_gradient_error": res["phase_gradient_error"]}
    doc = evaluate.report(model, ds, res["align"], res["comparison"],
                          extra=extra)
    out = Path(args.out) if args.out else Path(args.run) / "report.json"
    evaluate.write_report(doc, out)
    print(f"wrote {out}")
    print(f"pattern match: {doc['pattern_match']}")
    print(f"hidden rel error: "
          f"{', '.join(f'{e:.4g}' for e in doc['hidden']['rel_error'])}")
    return EXIT_OK


def cmd_predict(args):
    ds = load_dataset(args.data)
    model, encoder = load_run(args.run)
    if ds.preset.kind != "ode":
        raise CliError("predict supports the ODE presets only", EXIT_FAIL)
    res = evaluate.evaluate_run(ds, model, encoder)
    start = args.start - res["lo"]
    if start < 0 or start >= res["hidden_estimate"].shape[0]:
        raise CliError(f"--start must be in [{res['lo']}, {res['hi']})",
                       EXIT_FAIL)
    ds_fwd = datagen.Dataset(
        preset=ds.preset, seed=ds.seed,
        visible_raw=ds.visible_raw[args.start:],
        hidden_truth=ds.hidden_truth[args.start:], norm=ds.norm)
    horizon = evaluate.prediction_horizon(
        model, ds_fwd, res["align"], res["hidden_estimate"][start])
    unit = "Lyapunov times" if ds.preset.lyapunov_time else "time units"
    print(f"prediction horizon: {horizon:.3f} {unit}")
    return EXIT_OK


def cmd_report(args):
    path = Path(args.run) / "report.json"
    if not path.exists():
        raise CliError(f"no report at {path}; run `symder eval` first",
                       EXIT_MISSING)
    doc = json.loads(path.read_text())
    print(f"preset: {doc['preset']}  seed: {doc['seed']}")
    print(f"pattern match: {doc['pattern_match']}")
    print(f"active terms: {doc['active_terms']}")
    print(f"hidden rel error: "
          f"{', '.join(f'{e:.4g}' for e in doc['hidden']['rel_error'])}")
    for eq, row in doc["equations"].items():
        terms = "  ".join(f"{c:+.4g} {name}" for name, c in row.items())
        print(f"  d[{eq}]/dt = {terms}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="symder",
        description="sparse symbolic dynamics recovery from partial "
                    "observations")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--preset", required=True,
                   choices=sorted(DEFAULT_CONFIGS))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-time", type=int, default=None)
    g.add_argument("--nx", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="fit coefficients and encoder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--width", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a trained run against the truth")
    e.add_argument("--data", required=True)
    e.add_argument("--run", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="forecast horizon from a trained run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--start", type=int, default=100)
    p.set_defaults(fn=cmd_predict)

    r = sub.add_parser("report", help="print a saved evaluation report")
    r.add_argument("--run", required=True)
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
