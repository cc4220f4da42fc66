"""Joint end-to-end training and hyperparameter sweeps."""

import hashlib
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import torch

from . import __version__
from .checkpoint import checkpoint_bytes, save_checkpoint
from .diffusion import DiffusionPrior
from .errors import ConfigError, TrainingAborted
from .model import LatentSpec, ModalitySpec, MultimodalModel
from .noise import NoiseSource
from .objectives import total_loss

log = logging.getLogger(__name__)

LOG_KEYS = ("step", "total", "mmvae_plus", "cross_mi", "gen_aug", "diffusion", "lr")


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def code_version():
    return hashlib.sha1(f"idmvae-{__version__}".encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    steps: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    wall_clock: float = 0.0
    config_hash: str = ""
    code_version: str = ""

    def step_lines(self):
        return [json.dumps({k: s[k] for k in LOG_KEYS}, sort_keys=True) for s in self.steps]

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "run.jsonl"), "w") as f:
            f.writelines(line + "\n" for line in self.step_lines())
        with open(os.path.join(directory, "run_meta.json"), "w") as f:
            json.dump({"metrics": self.metrics, "wall_clock": self.wall_clock,
                       "config_hash": self.config_hash, "code_version": self.code_version},
                      f, indent=2, sort_keys=True)


def build_model(dataset, model_cfg, loss_cfg, seed=0):
    """Fresh model (and diffusion prior when its loss weight is positive) for a dataset."""
    torch.manual_seed(seed)
    latent = LatentSpec(model_cfg.d_z, model_cfg.d_w, dataset.n_modalities)
    if model_cfg.modalities:
        specs = [ModalitySpec(**s) for s in model_cfg.modalities]
    else:
        sigma = model_cfg.decoder_sigma
        specs = [ModalitySpec(d, dataset.likelihood, sigma) for d in dataset.input_dims]
    for spec, d in zip(specs, dataset.input_dims):
        if spec.input_dim != d:
            raise ConfigError(f"modality input_dim {spec.input_dim} != dataset dim {d}")
    model = MultimodalModel(latent, specs, hidden=model_cfg.hidden,
                            separate_encoders=model_cfg.separate_encoders)
    diffusion = None
    if loss_cfg.diffusion_weight > 0:
        diffusion = DiffusionPrior(model_cfg.d_z, T=model_cfg.diffusion_steps,
                                   beta_start=model_cfg.diffusion_beta_start,
                                   beta_end=model_cfg.diffusion_beta_end,
                                   hidden=model_cfg.diffusion_hidden)
    return model, diffusion


def _param_groups(model, diffusion, cfg):
    groups = [{"params": list(model.parameters()), "lr": cfg.learning_rate}]
    if diffusion is not None:
        groups.append({"params": list(diffusion.parameters()),
                       "lr": cfg.diffusion_learning_rate or cfg.learning_rate})
    return groups


def train(model, diffusion, dataset, cfg, evaluate_fn=None, meta=None, on_step=None):
    """Train all modules jointly with a single Adam optimizer.

    Deterministic given ``cfg.seed``: the data order and every stochastic draw
    come from one :class:`NoiseSource`. ``evaluate_fn(model, diffusion, epoch)``
    is called every ``cfg.eval_every`` epochs and at the end; a returned
    ``"select"`` entry marks the best checkpoint. Returns ``(checkpoint, record)``
    where ``checkpoint`` is the final archive path (or its bytes when
    ``cfg.checkpoint_dir`` is unset).

    Raises :class:`TrainingAborted` on a non-finite loss, leaving the last
    written checkpoint untouched.
    """
    loss_cfg = cfg.loss
    if cfg.batch_size <= loss_cfg.k_negatives:
        raise ConfigError("batch_size must exceed k_negatives")
    if loss_cfg.diffusion_weight > 0 and diffusion is None:
        raise ConfigError("diffusion_weight > 0 needs a diffusion prior")
    train_split = dataset["train"]
    n = len(train_split)
    if n < cfg.batch_size:
        raise ConfigError(f"training split ({n}) smaller than one batch ({cfg.batch_size})")

    noise = NoiseSource(cfg.seed)
    xs_all = train_split.tensors(model.dtype)
    modules = [model] + ([diffusion] if diffusion is not None else [])
    opt = torch.optim.Adam(_param_groups(model, diffusion, cfg), lr=cfg.learning_rate,
                           betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    params = [p for mod in modules for p in mod.parameters()]
    meta = dict(meta or {})
    record = RunRecord(config_hash=config_hash(meta.get("config", asdict(cfg))),
                       code_version=code_version())
    ckpt_dir = cfg.checkpoint_dir
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    best = None
    t0 = time.perf_counter()
    step = 0

    def snapshot(epoch, name):
        data = checkpoint_bytes(model, diffusion, {**meta, "seed": cfg.seed, "step": step,
                                                   "epoch": epoch, "loss": asdict(loss_cfg)})
        if ckpt_dir:
            path = os.path.join(ckpt_dir, name)
            with open(path, "wb") as f:
                f.write(data)
            return path
        return data

    for epoch in range(1, cfg.epochs + 1):
        for mod in modules:
            mod.train()
        order = noise.permutation(n)
        for i in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xs = [x[idx] for x in xs_all]
            parts = total_loss(model, diffusion, xs, loss_cfg, noise)
            bad = parts.first_non_finite()
            if bad is not None:
                record.wall_clock = time.perf_counter() - t0
                raise TrainingAborted(
                    f"non-finite '{bad}' loss at step {step} (epoch {epoch})",
                    component=bad, step=step,
                    checkpoint=os.path.join(ckpt_dir, "last.ckpt") if ckpt_dir else None)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            if on_step is not None:
                on_step(step, parts)
            if step % cfg.log_every == 0:
                entry = parts.as_dict()
                entry.update(step=step, epoch=epoch, lr=opt.param_groups[0]["lr"])
                record.steps.append(entry)
            step += 1
        is_last = epoch == cfg.epochs
        if (cfg.eval_every and epoch % cfg.eval_every == 0) or is_last:
            if evaluate_fn is not None:
                metrics = dict(evaluate_fn(model, diffusion, epoch))
                metrics["epoch"] = epoch
                record.metrics.append(metrics)
                sel = metrics.get("select")
                if sel is not None and (best is None or sel > best) and ckpt_dir:
                    best = sel
                    snapshot(epoch, "best.ckpt")
            if ckpt_dir:
                snapshot(epoch, "last.ckpt")
    record.wall_clock = time.perf_counter() - t0
    final = snapshot(cfg.epochs, "final.ckpt")
    return final, record


# ---------------------------------------------------------------------------
# sweeps

GRID_KEYS = ("lambda1", "lambda2", "diffusion_weight", "genaug_variant", "seed")


def expand_grid(grid):
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}; allowed: {GRID_KEYS}")
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must be non-empty")
    keys = [k for k in GRID_KEYS if k in grid]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_cell(exp, cell):
    loss_changes = {k: v for k, v in cell.items() if k != "seed"}
    out = exp.with_loss(**loss_changes)
    if "seed" in cell:
        out = out.with_train(seed=cell["seed"])
    return out


def _cell_name(cell):
    return "_".join(f"{k}={v}" for k, v in cell.items())


def run_cell(exp, dataset, cell, out_dir=None):
    """Train one grid cell; latent probe accuracies on val (for selection) and test."""
    from .eval import latent_classification

    cell_exp = apply_cell(exp, cell)
    model, diffusion = build_model(dataset, cell_exp.model, cell_exp.loss, cell_exp.train.seed)
    cfg = cell_exp.train
    if out_dir:
        from dataclasses import replace
        cfg = replace(cfg, checkpoint_dir=out_dir)
    _, record = train(model, diffusion, dataset, cfg, meta={"cell": cell})
    if out_dir:
        record.write(out_dir)
    row = dict(cell)
    for split in ("val", "test"):
        scores = latent_classification(model, dataset, NoiseSource(cfg.seed + 7919),
                                       test_split=split)
        row.update({f"{split}_{k}": v for k, v in scores.items() if not k.startswith("chance")})
    row["wall_clock"] = record.wall_clock
    return row


def _run_cell_job(args):
    return run_cell(*args)


def select_best(rows, key="val_z_shared"):
    """Highest ``key``; ties go to smaller ``lambda2`` then smaller ``lambda1``."""
    return max(rows, key=lambda r: (r[key], -r.get("lambda2", 0.0), -r.get("lambda1", 0.0)))


def sweep(grid, dataset, exp, out_dir=None, jobs=1):
    """Train every grid cell; returns ``(best_row, rows)``.

    Cells are independent; with ``jobs > 1`` they run in worker processes.
    """
    cells = expand_grid(grid)
    dirs = [os.path.join(out_dir, "cells", _cell_name(c)) if out_dir else None for c in cells]
    args = [(exp, dataset, c, d) for c, d in zip(cells, dirs)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_job, args))
    else:
        rows = [run_cell(*a) for a in args]
    best = select_best(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.json"), "w") as f:
            json.dump({"rows": rows, "best": best}, f, indent=2, sort_keys=True)
    return best, rows
