"""Plots and comparison tables built from run, eval and sweep directories.

A run directory may hold ``run.jsonl`` (from ``train``), ``metrics.json`` and
``projection.csv`` (from ``eval``); a sweep directory holds ``sweep.json``.
Images are written with the Agg backend and no software/date metadata, so
identical inputs give identical PNG bytes.
"""

import csv
import io
import json
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InputError  # noqa: E402

LATENT_KEYS = ("z_shared", "z_private", "w_private", "w_shared")
LOSS_KEYS = ("total", "mmvae_plus", "cross_mi", "gen_aug", "diffusion")
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _csv(rows, fieldnames=None):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames or list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


# ---------------------------------------------------------------------------
# loading


def load_run(path):
    run = {"name": os.path.basename(os.path.normpath(path)), "path": path,
           "steps": None, "metrics": None, "projection": None}
    jsonl = os.path.join(path, "run.jsonl")
    if os.path.exists(jsonl):
        with open(jsonl) as f:
            run["steps"] = [json.loads(line) for line in f if line.strip()]
    metrics = os.path.join(path, "metrics.json")
    if os.path.exists(metrics):
        with open(metrics) as f:
            run["metrics"] = json.load(f)
    proj = os.path.join(path, "projection.csv")
    if os.path.exists(proj):
        with open(proj) as f:
            run["projection"] = list(csv.DictReader(f))
    if run["steps"] is None and run["metrics"] is None:
        raise InputError(f"{path}: neither run.jsonl nor metrics.json found")
    return run


def load_sweep(path):
    with open(os.path.join(path, "sweep.json")) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# plots


def plot_loss_curves(runs, path):
    keys = [k for k in LOSS_KEYS if any(r["steps"] and k in r["steps"][0] for r in runs)]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for run in runs:
            if run["steps"]:
                ax.plot([s["step"] for s in run["steps"]], [s[key] for s in run["steps"]],
                        lw=0.8, label=run["name"])
        ax.set_title(key)
        ax.set_xlabel("step")
    if len(runs) > 1:
        axes[0][0].legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)


def plot_projection(rows, path):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    post = [r for r in rows if r["kind"] == "posterior"]
    prior = [r for r in rows if r["kind"] == "prior"]
    if post:
        sc = ax.scatter([float(r["pc1"]) for r in post], [float(r["pc2"]) for r in post],
                        c=[int(r["label"]) for r in post], cmap="tab10", s=4, vmin=0, vmax=9)
        fig.colorbar(sc, ax=ax, label="shared label")
    if prior:
        ax.scatter([float(r["pc1"]) for r in prior], [float(r["pc2"]) for r in prior],
                   c="black", s=3, label="prior")
        ax.legend(fontsize=7)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    _save(fig, path)


def _grouped_bars(ax, groups, series, values, errors=None):
    x = np.arange(len(groups))
    width = 0.8 / max(len(series), 1)
    for i, name in enumerate(series):
        err = None if errors is None else [errors[g][i] for g in range(len(groups))]
        ax.bar(x + (i - (len(series) - 1) / 2) * width, [values[g][i] for g in range(len(groups))],
               width, yerr=err, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(groups, fontsize=7, rotation=20 if len(groups) > 3 else 0)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=6)


def plot_coherence(runs, path):
    labels = ["self z_q,w_p", "self z_p,w_q", "cross z_q,w_p", "uncond"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, col in zip(axes, ("shared", "private")):
        vals = []
        for run in runs:
            m = run["metrics"]
            row = [m["self_gen"]["z_q_w_p"][col], m["self_gen"]["z_p_w_q"][col],
                   m["cross_gen"]["z_q_w_p"][col]]
            row.append(m["unconditional"] if col == "shared" else 0.0)
            vals.append(row)
        _grouped_bars(ax, labels, [r["name"] for r in runs], np.array(vals).T.tolist())
        ax.set_title(f"{col}-label accuracy of generated samples")
    fig.tight_layout()
    _save(fig, path)


def plot_latent_accuracy(runs, path):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    vals = [[run["metrics"]["latent"][k] for run in runs] for k in LATENT_KEYS]
    _grouped_bars(ax, list(LATENT_KEYS), [r["name"] for r in runs], vals)
    ax.set_title("latent linear classification (test)")
    fig.tight_layout()
    _save(fig, path)


# ---------------------------------------------------------------------------
# tables


def summary_rows(runs):
    rows = []
    for run in runs:
        row = {"run": run["name"]}
        m = run["metrics"]
        if m is not None:
            row.update({k: m["latent"][k] for k in LATENT_KEYS})
            row.update({"self_shared": m["self_gen"]["z_q_w_p"]["shared"],
                        "self_private_from_w": m["self_gen"]["z_p_w_q"]["private"],
                        "cross_shared": m["cross_gen"]["z_q_w_p"]["shared"],
                        "uncond": m["unconditional"],
                        "uncond_null": m["chance"]["unconditional_null"]})
        if run["steps"]:
            last = run["steps"][-1]
            row.update({f"final_{k}": last[k] for k in LOSS_KEYS})
        rows.append({k: _fmt(v) for k, v in row.items()})
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    return rows, fields


def _cell_key(row, grid_keys):
    return tuple((k, row[k]) for k in grid_keys if k != "seed")


def variant_rows(sweep_doc, split="test"):
    """Seed-averaged probe accuracies per grid cell (variant side-by-side table)."""
    rows = sweep_doc["rows"]
    grid_keys = [k for k in rows[0] if not k.startswith(("val_", "test_")) and k != "wall_clock"]
    groups = defaultdict(list)
    for r in rows:
        groups[_cell_key(r, grid_keys)].append(r)
    out = []
    for key, members in groups.items():
        row = dict(key)
        row["n_seeds"] = len(members)
        for k in LATENT_KEYS:
            vals = np.array([m[f"{split}_{k}"] for m in members])
            row[k] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std())
        out.append(row)
    # variants side by side: group on genaug_variant first, then the numeric weights
    order = sorted(grid_keys, key=lambda k: k != "genaug_variant")
    return sorted(out, key=lambda r: tuple(r[k] for k in order if k != "seed"))


def genaug_check_rows(sweep_doc, split="test"):
    """Per cell with lambda2 > 0: seeds where w->shared is <= the matching lambda2 = 0 cell."""
    rows = sweep_doc["rows"]
    if not rows or "lambda2" not in rows[0]:
        return []
    index = {tuple(sorted((k, v) for k, v in r.items()
                          if not k.startswith(("val_", "test_")) and k != "wall_clock")): r for r in rows}
    checks = defaultdict(lambda: {"seeds_le": 0, "n_seeds": 0, "gaps": []})
    for key, r in index.items():
        if r["lambda2"] == 0:
            continue
        base = index.get(tuple((k, 0 if k == "lambda2" else v) for k, v in key))
        if base is None:
            continue
        cell = tuple((k, v) for k, v in key if k != "seed")
        c = checks[cell]
        gap = r[f"{split}_w_shared"] - base[f"{split}_w_shared"]
        c["n_seeds"] += 1
        c["seeds_le"] += int(gap <= 0)
        c["gaps"].append(gap)
    out = []
    for cell, c in sorted(checks.items(), key=lambda kv: str(kv[0])):
        row = dict(cell)
        row.update(seeds_le=c["seeds_le"], n_seeds=c["n_seeds"], mean_gap=float(np.mean(c["gaps"])),
                   holds=c["seeds_le"] * 3 >= 2 * c["n_seeds"])
        out.append(row)
    return out


def plot_variants(rows, path):
    fig, ax = plt.subplots(figsize=(7, 3.4))
    keys = [k for k in rows[0] if k not in ("n_seeds",) + LATENT_KEYS and not k.endswith("_std")]
    groups = [", ".join(f"{k}={r[k]}" for k in keys) for r in rows]
    vals = [[r[k] for k in LATENT_KEYS] for r in rows]
    errs = [[r[f"{k}_std"] for k in LATENT_KEYS] for r in rows]
    _grouped_bars(ax, groups, list(LATENT_KEYS), vals, errs)
    ax.set_title("latent classification by grid cell (test, mean over seeds)")
    fig.tight_layout()
    _save(fig, path)


# ---------------------------------------------------------------------------
# entry point


def build_report(paths, out_dir):
    """Write every artifact for ``paths`` into ``out_dir``; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    sweeps = [p for p in paths if os.path.exists(os.path.join(p, "sweep.json"))]
    runs = [load_run(p) for p in paths if p not in sweeps]

    def put(name, text):
        with open(os.path.join(out_dir, name), "w") as f:
            f.write(text)
        written.append(name)

    for i, p in enumerate(sweeps):
        doc = load_sweep(p)
        suffix = "" if len(sweeps) == 1 else f"_{i}"
        rows = variant_rows(doc)
        put(f"variant_comparison{suffix}.csv", _csv([{k: _fmt(v) for k, v in r.items()} for r in rows]))
        checks = genaug_check_rows(doc)
        if checks:
            put(f"genaug_check{suffix}.csv", _csv([{k: _fmt(v) for k, v in r.items()} for r in checks]))
        plot_variants(rows, os.path.join(out_dir, f"variant_comparison{suffix}.png"))
        written.append(f"variant_comparison{suffix}.png")

    if not runs:
        return written
    with_steps = [r for r in runs if r["steps"]]
    with_metrics = [r for r in runs if r["metrics"]]
    if with_steps:
        plot_loss_curves(with_steps, os.path.join(out_dir, "loss_curves.png"))
        written.append("loss_curves.png")
    if with_metrics:
        plot_coherence(with_metrics, os.path.join(out_dir, "coherence.png"))
        written.append("coherence.png")
    if len(runs) == 1:
        if runs[0]["projection"]:
            plot_projection(runs[0]["projection"], os.path.join(out_dir, "latent_pca.png"))
            written.append("latent_pca.png")
        rows, fields = summary_rows(runs)
        put("summary.csv", _csv(rows, fields))
    else:
        if with_metrics:
            plot_latent_accuracy(with_metrics, os.path.join(out_dir, "latent_accuracy.png"))
            written.append("latent_accuracy.png")
        rows, fields = summary_rows(runs)
        put("comparison.csv", _csv(rows, fields))
    return written
