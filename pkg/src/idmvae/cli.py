"""Command-line entry point: ``idmvae data | train | eval | sweep | report``.

Exit codes: 0 success, 1 configuration error (including refusing to
overwrite without ``--force``), 2 numeric abort, 3 I/O error. Every command
loads and validates its inputs before creating any output.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

from .config import OUT_ENV, experiment_to_dict, load_experiment
from .errors import (
    AmbiguityError, ConfigError, GateError, InputError, NumericError, TrainingAborted)

log = logging.getLogger("idmvae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
ABLATIONS = {"no-crossmi": {"lambda1": 0.0}, "no-genaug": {"lambda2": 0.0}}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the numeric-abort code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _resolve_out(args, exp=None, default=None):
    if getattr(args, "out", None):
        return args.out
    if exp is not None:
        return exp.output_dir  # already carries the IDMVAE_OUT override
    return os.environ.get(OUT_ENV) or default


def _claim_dir(path, force):
    """Refuse a non-empty output directory unless ``force``; then create it."""
    if os.path.exists(path) and not os.path.isdir(path):
        raise ConfigError(f"{path} exists and is not a directory")
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"{path} already exists and is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"{path} is not writable")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_exp(args):
    exp = load_experiment(args.config)
    if getattr(args, "seed", None) is not None:
        exp = exp.with_train(seed=args.seed)
    for name in getattr(args, "ablate", None) or []:
        exp = exp.with_loss(**ABLATIONS[name])
    return exp


def _dataset_for(exp, data_path):
    from .data import load_dataset, make_dataset

    if data_path:
        ds = load_dataset(data_path)
        if ds.kind != exp.dataset_kind:
            raise ConfigError(f"dataset at {data_path} is {ds.kind!r}, config expects {exp.dataset_kind!r}")
        return ds
    return make_dataset(exp.dataset_kind, exp.dataset)


def _tree_hash(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        with open(os.path.join(path, name), "rb") as f:
            h.update(f.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_data(args):
    from .data import make_dataset, save_dataset

    exp = load_experiment(args.config)
    if args.seed is not None:
        exp = exp.with_dataset(seed=args.seed)
    out = args.out or os.path.join(exp.output_dir, "data")
    if args.format == "archive":
        if os.path.exists(out) and not args.force:
            raise ConfigError(f"{out} already exists; pass --force to overwrite")
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    else:
        _claim_dir(out, args.force)
    ds = make_dataset(exp.dataset_kind, exp.dataset)
    save_dataset(ds, out, fmt=args.format)
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {exp.dataset_kind} dataset to {out}: M={ds.n_modalities} dims={ds.input_dims} "
          f"splits={sizes} shared_classes={ds.n_shared_classes} private_classes={ds.n_private_classes}")
    if args.format == "dir":
        print(f"sha256 {_tree_hash(out)}")
    return EXIT_OK


def cmd_train(args):
    from .eval import latent_classification
    from .noise import NoiseSource
    from .train import build_model, train

    exp = _load_exp(args)
    out = _resolve_out(args, exp)
    ds = _dataset_for(exp, args.data)
    model, diffusion = build_model(ds, exp.model, exp.loss, exp.train.seed)
    _claim_dir(out, args.force)
    _write_json(os.path.join(out, "config.json"), experiment_to_dict(exp))
    cfg = replace(exp.train, checkpoint_dir=out)

    def evaluate_fn(m, d, epoch):
        acc = latent_classification(m, ds, NoiseSource(cfg.seed + 7919), test_split="val")
        return {"val_" + k: v for k, v in acc.items() if not k.startswith("chance")} | \
            {"select": acc["z_shared"]}

    def on_step(step, parts):
        if step % 100 == 0:
            log.info("step %d total %.4f", step, parts.total.item())

    try:
        _, record = train(model, diffusion, ds, cfg,
                          evaluate_fn=evaluate_fn if cfg.eval_every else None,
                          meta={"config": experiment_to_dict(exp)}, on_step=on_step)
    except TrainingAborted as e:
        print(f"training aborted: {e}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
        raise
    record.write(out)
    last = record.steps[-1]
    print(f"trained {cfg.epochs} epochs in {record.wall_clock:.1f}s; final total {last['total']:.4f}; "
          f"checkpoint {os.path.join(out, 'final.ckpt')}")
    return EXIT_OK


def cmd_eval(args):
    import torch

    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .eval import evaluate, latent_projection, train_reference_classifiers
    from .noise import NoiseSource

    model, diffusion, manifest = load_checkpoint(args.checkpoint)
    if args.dataset.endswith(".json"):
        exp = load_experiment(args.dataset)
        ds = _dataset_for(exp, None)
    else:
        ds = load_dataset(args.dataset)
    if ds.input_dims != [s["input_dim"] for s in manifest["model"]["modalities"]]:
        raise ConfigError("checkpoint modality dimensions do not match the dataset")
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    targets = [os.path.join(out, n) for n in ("metrics.json", "latent.csv", "coherence.csv", "projection.csv")]
    if any(os.path.exists(t) for t in targets) and not args.force:
        raise ConfigError(f"evaluation outputs already exist in {out}; pass --force to overwrite")
    os.makedirs(out, exist_ok=True)
    torch.manual_seed(args.seed)
    refs = train_reference_classifiers(ds, seed=args.seed, epochs=args.ref_epochs)
    noise = NoiseSource(args.seed)
    report = evaluate(model, ds, refs, noise, diffusion, split=args.split, n=args.n,
                      use_samples=not args.means)
    proj = latent_projection(model, ds[args.split], args.n, noise.spawn(1), diffusion)
    latent_csv, coherence_csv = report.tables_csv()
    with open(targets[0], "w") as f:
        f.write(report.to_json() + "\n")
    for path, text in zip(targets[1:], (latent_csv, coherence_csv, proj.to_csv())):
        with open(path, "w") as f:
            f.write(text)
    lat = report.latent
    print(f"z->shared {lat['z_shared']:.3f}  z->private {lat['z_private']:.3f}  "
          f"w->private {lat['w_private']:.3f}  w->shared {lat['w_shared']:.3f}")
    print(f"self-gen shared {report.self_gen['z_q_w_p']['shared']:.3f}  "
          f"cross-gen shared {report.cross_gen['z_q_w_p']['shared']:.3f}  "
          f"unconditional {report.unconditional:.3f} (null {report.chance['unconditional_null']:.3f})")
    print(f"wrote {', '.join(os.path.basename(t) for t in targets)} to {out}")
    return EXIT_OK


def cmd_sweep(args):
    from .train import apply_cell, expand_grid, sweep

    exp = _load_exp(args)
    try:
        with open(args.grid) as f:
            grid = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.grid}: invalid JSON ({e})") from e
    cells = expand_grid(grid)
    for cell in cells:  # every cell must form a valid configuration before anything runs
        apply_cell(exp, cell)
    out = _resolve_out(args, exp)
    ds = _dataset_for(exp, args.data)
    _claim_dir(out, args.force)
    _write_json(os.path.join(out, "config.json"), experiment_to_dict(exp))
    _write_json(os.path.join(out, "grid.json"), grid)
    best, rows = sweep(grid, ds, exp, out_dir=out, jobs=args.jobs)
    print(f"{len(rows)} cells; best by val z->shared: "
          + ", ".join(f"{k}={v}" for k, v in best.items() if not k.startswith(("val_", "test_", "wall")))
          + f" ({best['val_z_shared']:.3f})")
    return EXIT_OK


def cmd_report(args):
    from .report import build_report

    for p in args.runs:
        if not os.path.isdir(p):
            raise FileNotFoundError(f"{p} is not a directory")
    out = args.out or os.path.join(args.runs[0], "report")
    _claim_dir(out, args.force)
    written = build_report(args.runs, out)
    print(f"wrote {', '.join(written)} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="idmvae", description="Train and evaluate multimodal VAEs with shared/private latents.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("data", help="generate a synthetic dataset")
    d.add_argument("config", help="experiment JSON config (its dataset section is used)")
    d.add_argument("--out", help="output directory or archive path (default: <output_dir>/data)")
    d.add_argument("--seed", type=int, help="override the dataset seed")
    d.add_argument("--format", choices=("dir", "archive"), default="dir",
                   help="directory of raw arrays or a single zip archive")
    d.add_argument("--force", action="store_true", help="overwrite existing output")
    d.set_defaults(func=cmd_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", help="experiment JSON config")
    t.add_argument("--data", help="dataset directory or archive (default: generate from config)")
    t.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or the config's output_dir)")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS),
                   help="no-crossmi sets lambda1=0, no-genaug sets lambda2=0; repeatable")
    t.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint", help="checkpoint archive written by train")
    e.add_argument("dataset", help="dataset directory/archive, or an experiment JSON config to regenerate it")
    e.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    e.add_argument("--split", choices=("val", "test"), default="test", help="evaluation split")
    e.add_argument("--n", type=int, default=2000, help="samples per coherence estimate")
    e.add_argument("--means", action="store_true", help="probe posterior means instead of samples")
    e.add_argument("--seed", type=int, default=0, help="seed for sampling and reference classifiers")
    e.add_argument("--ref-epochs", type=int, default=30, help="training epochs of the reference classifiers")
    e.add_argument("--force", action="store_true", help="overwrite existing evaluation outputs")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid search over loss weights")
    s.add_argument("config", help="base experiment JSON config")
    s.add_argument("grid", help='JSON object of lists, e.g. {"lambda1": [0, 8], "seed": [0, 1, 2]}')
    s.add_argument("--data", help="dataset directory or archive (default: generate from config)")
    s.add_argument("--out", help=f"sweep directory (default: ${OUT_ENV} or the config's output_dir)")
    s.add_argument("--seed", type=int, help="override the base training seed")
    s.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="as for train")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty sweep directory")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="plots and tables from run, eval or sweep directories")
    r.add_argument("runs", nargs="+", help="run or sweep directories")
    r.add_argument("--out", help="report directory (default: <first run>/report)")
    r.add_argument("--force", action="store_true", help="overwrite a non-empty report directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, InputError, GateError, AmbiguityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
