"""Synthetic multi-view datasets with ground-truth shared and private labels.

Two generators:

* :func:`make_factors_dataset`: continuous views ``x_m = g_m([s; p_m]) + noise``
  where ``s`` encodes a shared class, ``p_m`` a per-view private class and
  ``g_m`` is a frozen random tanh network.
* :func:`make_quadrant_glyphs`: 16x16 images; a digit glyph shared by all views
  sits in a per-view random quadrant over a per-view background texture.

Datasets are stored as a directory holding ``manifest.json`` plus raw
little-endian ``float32`` inputs and ``int32`` labels.
"""

import json
import os
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .errors import AmbiguityError, ConfigError, InputError

SPLITS = ("train", "val", "test")
FORMAT_NAME = "idmvae-dataset"
FORMAT_VERSION = 1


@dataclass
class AlignedBatch:
    """Co-occurring samples of all views plus their labels."""

    xs: list
    shared: np.ndarray
    private: list

    def __post_init__(self):
        n = len(self.shared)
        if len(self.private) != len(self.xs):
            raise InputError("one private label vector per modality is required")
        if any(len(x) != n for x in self.xs) or any(len(p) != n for p in self.private):
            raise InputError("all fields of an AlignedBatch must have the same length")

    def __len__(self):
        return len(self.shared)

    @property
    def n_modalities(self):
        return len(self.xs)

    def subset(self, index):
        return AlignedBatch([x[index] for x in self.xs], self.shared[index],
                            [p[index] for p in self.private])

    def tensors(self, dtype=torch.float32):
        return [torch.as_tensor(x, dtype=dtype) for x in self.xs]


@dataclass
class Dataset:
    """Train/val/test splits plus the metadata needed to interpret them."""

    kind: str
    config: dict
    splits: dict
    n_shared_classes: int
    n_private_classes: int
    likelihood: str
    extra: dict = field(default_factory=dict)

    @property
    def n_modalities(self):
        return self.splits["train"].n_modalities

    @property
    def input_dims(self):
        return [x.shape[1] for x in self.splits["train"].xs]

    def __getitem__(self, split):
        return self.splits[split]


def _validate_counts(cfg):
    if cfg.n_modalities < 2:
        raise ConfigError("need at least two modalities")
    for name in ("n_train", "n_val", "n_test"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")


def _split_seeds(seed):
    # disjoint sub-seeds per split
    ss = np.random.SeedSequence(seed)
    model_seq, *split_seqs = ss.spawn(1 + len(SPLITS))
    return model_seq, dict(zip(SPLITS, split_seqs))


# ---------------------------------------------------------------------------
# factors dataset


@dataclass(frozen=True)
class FactorsDatasetConfig:
    n_modalities: int = 2
    n_shared_classes: int = 10
    n_private_classes: int = 4
    input_dim: int = 50
    noise_sigma: float = 0.05
    mixing_depth: int = 2
    jitter: float = 0.3
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        _validate_counts(self)
        if self.n_shared_classes < 2 or self.n_private_classes < 2:
            raise ConfigError("need at least two classes per label type")
        if self.mixing_depth < 0 or self.noise_sigma < 0 or self.jitter < 0:
            raise ConfigError("mixing_depth, noise_sigma and jitter must be non-negative")
        if self.input_dim < self.n_shared_classes + self.n_private_classes:
            raise ConfigError("input_dim must hold the shared and private codes")


def _mixing_weights(cfg, rng):
    d_in = cfg.n_shared_classes + cfg.n_private_classes
    nets = []
    for _ in range(cfg.n_modalities):
        layers, d = [], d_in
        for _ in range(cfg.mixing_depth):
            W = rng.normal(0.0, 1.5 / np.sqrt(d), size=(d, cfg.input_dim))
            b = rng.normal(0.0, 0.1, size=cfg.input_dim)
            layers.append((W, b))
            d = cfg.input_dim
        nets.append(layers)
    return nets


def _mix(layers, code, input_dim):
    if not layers:
        out = np.zeros((code.shape[0], input_dim))
        out[:, :code.shape[1]] = code
        return out
    h = code
    for W, b in layers:
        h = np.tanh(h @ W + b)
    return h


def make_factors_dataset(cfg=FactorsDatasetConfig()):
    model_seq, split_seqs = _split_seeds(cfg.seed)
    nets = _mixing_weights(cfg, np.random.default_rng(model_seq))
    C, P = cfg.n_shared_classes, cfg.n_private_classes
    splits = {}
    for split in SPLITS:
        n = getattr(cfg, f"n_{split}")
        rng = np.random.default_rng(split_seqs[split])
        shared = rng.integers(0, C, size=n)
        s = np.eye(C)[shared] + cfg.jitter * rng.random((n, C))
        xs, private = [], []
        for m in range(cfg.n_modalities):
            priv = rng.integers(0, P, size=n)
            p = np.eye(P)[priv] + cfg.jitter * rng.random((n, P))
            x = _mix(nets[m], np.concatenate([s, p], axis=1), cfg.input_dim)
            x = x + cfg.noise_sigma * rng.normal(size=x.shape)
            xs.append(x.astype(np.float32))
            private.append(priv.astype(np.int32))
        splits[split] = AlignedBatch(xs, shared.astype(np.int32), private)
    return Dataset("factors", asdict(cfg), splits, C, P, "gaussian")


# ---------------------------------------------------------------------------
# quadrant glyphs

GLYPH_SIZE = 8

_GLYPHS = [
    ["..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"],
    ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........"],
    ["..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........"],
    ["....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "........"],
    [".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........"],
    ["..####..", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"],
    [".######.", ".....##.", "....##..", "...##...", "..##....", "..##....", "..##....", "........"],
    ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........"],
    ["..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........"],
]

GLYPHS = np.array([[[c == "#" for c in row] for row in g] for g in _GLYPHS], dtype=np.float32)

BACKGROUND_MAX = 0.3
TEXTURE_PERIOD = 16


@dataclass(frozen=True)
class QuadrantGlyphConfig:
    n_modalities: int = 3
    canvas: int = 16
    background_intensity: float = 1.0
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        _validate_counts(self)
        if self.canvas != 2 * GLYPH_SIZE:
            raise ConfigError(f"canvas must be {2 * GLYPH_SIZE} so a glyph fills one quadrant")
        if self.n_modalities > 5:
            raise ConfigError("at most five background patterns are defined")
        if not 0.0 <= self.background_intensity <= 1.0:
            raise ConfigError("background_intensity must lie in [0, 1]")


def background_texture(pattern, size=TEXTURE_PERIOD):
    """Periodic texture in ``[0, 1]`` for background pattern ``pattern`` (0..4)."""
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    w = 2 * np.pi / size
    if pattern == 0:
        tex = 0.5 + 0.5 * np.sin(2 * w * i)
    elif pattern == 1:
        tex = 0.5 + 0.5 * np.sin(2 * w * j)
    elif pattern == 2:
        tex = ((i // 2 + j // 2) % 2).astype(float)
    elif pattern == 3:
        tex = 0.5 + 0.5 * np.sin(w * (i + j) * 2)
    elif pattern == 4:
        tex = 0.5 + 0.5 * np.cos(w * i) * np.cos(w * j)
    else:
        raise InputError(f"unknown background pattern {pattern}")
    return tex


def quadrant_slices(q, canvas=16):
    h = canvas // 2
    r, c = divmod(q, 2)
    return slice(r * h, (r + 1) * h), slice(c * h, (c + 1) * h)


def _render(glyph_cls, quadrants, pattern, shifts, grain, cfg):
    n = len(glyph_cls)
    tex = background_texture(pattern, TEXTURE_PERIOD)
    tiled = np.tile(tex, (3, 3))
    imgs = np.empty((n, cfg.canvas, cfg.canvas), dtype=np.float64)
    for k in range(n):
        di, dj = shifts[k]
        imgs[k] = tiled[di:di + cfg.canvas, dj:dj + cfg.canvas]
    imgs = cfg.background_intensity * BACKGROUND_MAX * (0.7 * imgs + 0.3 * grain)
    for q in range(4):
        rows, cols = quadrant_slices(q, cfg.canvas)
        sel = quadrants == q
        region = imgs[sel][:, rows, cols]
        glyph = GLYPHS[glyph_cls[sel]]
        imgs[np.ix_(sel, np.arange(rows.start, rows.stop), np.arange(cols.start, cols.stop))] = \
            np.where(glyph > 0, 1.0, region)
    return imgs.reshape(n, -1).astype(np.float32)


def make_quadrant_glyphs(cfg=QuadrantGlyphConfig()):
    _, split_seqs = _split_seeds(cfg.seed)
    splits = {}
    for split in SPLITS:
        n = getattr(cfg, f"n_{split}")
        rng = np.random.default_rng(split_seqs[split])
        shared = rng.integers(0, 10, size=n)
        xs, private = [], []
        for m in range(cfg.n_modalities):
            quad = rng.integers(0, 4, size=n)
            shifts = rng.integers(0, TEXTURE_PERIOD, size=(n, 2))
            grain = rng.random((n, cfg.canvas, cfg.canvas))
            xs.append(_render(shared, quad, m, shifts, grain, cfg))
            private.append(quad.astype(np.int32))
        splits[split] = AlignedBatch(xs, shared.astype(np.int32), private)
    return Dataset("glyphs", asdict(cfg), splits, 10, 4, "bernoulli")


def quadrant_of(image, canvas=16, background_intensity=1.0):
    """Quadrant holding most above-background mass.

    Pixels count only by how far they exceed the background ceiling, so any
    generated glyph image is decoded exactly. Ties raise :class:`AmbiguityError`.
    """
    img = np.asarray(image, dtype=np.float64).reshape(canvas, canvas)
    excess = np.clip(img - background_intensity * BACKGROUND_MAX, 0.0, None)
    mass = np.array([excess[quadrant_slices(q, canvas)].sum() for q in range(4)])
    best = np.flatnonzero(mass == mass.max())
    if len(best) != 1:
        raise AmbiguityError(f"quadrants {best.tolist()} tie with mass {mass.max():.4g}")
    return int(best[0])


# ---------------------------------------------------------------------------
# on-disk format


def _ordered(splits):
    # canonical split order, whatever order a parsed manifest came back in
    return [s for s in SPLITS if s in splits] + sorted(s for s in splits if s not in SPLITS)


def _file_names(split, M):
    names = {f"x{m}": f"{split}_x{m}.f32" for m in range(M)}
    names["shared"] = f"{split}_shared.i32"
    names.update({f"private{m}": f"{split}_private{m}.i32" for m in range(M)})
    return names


def _manifest(ds):
    M = ds.n_modalities
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": ds.kind,
        "config": ds.config,
        "n_modalities": M,
        "n_shared_classes": ds.n_shared_classes,
        "n_private_classes": ds.n_private_classes,
        "likelihood": ds.likelihood,
        "byte_order": "little",
        "layout": "row-major",
        "splits": {},
    }
    for split in _ordered(ds.splits):
        batch, files = ds.splits[split], {}
        for key, fname in _file_names(split, M).items():
            arr = _field(batch, key)
            files[key] = {"file": fname, "dtype": "float32" if key.startswith("x") else "int32",
                          "shape": list(arr.shape)}
        manifest["splits"][split] = {"size": len(batch), "files": files}
    return manifest


def _field(batch, key):
    if key == "shared":
        return batch.shared
    if key.startswith("private"):
        return batch.private[int(key[len("private"):])]
    return batch.xs[int(key[1:])]


def _encode(arr, dtype):
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def dataset_payload(ds):
    """Ordered ``(name, bytes)`` pairs making up the on-disk dataset."""
    manifest = _manifest(ds)
    items = [("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n")]
    for split in _ordered(manifest["splits"]):
        info, batch = manifest["splits"][split], ds.splits[split]
        for key, meta in info["files"].items():
            items.append((meta["file"], _encode(_field(batch, key), meta["dtype"])))
    return items


def save_dataset(ds, path, fmt="dir"):
    """Write ``ds`` as a directory (``fmt="dir"``) or a single zip archive."""
    items = dataset_payload(ds)
    if fmt == "dir":
        os.makedirs(path, exist_ok=True)
        for name, data in items:
            with open(os.path.join(path, name), "wb") as f:
                f.write(data)
    elif fmt == "archive":
        _write_zip(path, items)
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    return path


def _write_zip(path, items):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in items:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def load_dataset(path):
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            read = zf.read
            return _from_reader(read)

    def read(name):
        with open(os.path.join(path, name), "rb") as f:
            return f.read()
    return _from_reader(read)


def _from_reader(read):
    manifest = json.loads(read("manifest.json"))
    if manifest.get("format") != FORMAT_NAME:
        raise InputError("not an idmvae dataset")
    M = manifest["n_modalities"]
    splits = {}
    for split in _ordered(manifest["splits"]):
        info, arrays = manifest["splits"][split], {}
        for key, meta in info["files"].items():
            dt = np.dtype(meta["dtype"]).newbyteorder("<")
            arrays[key] = np.frombuffer(read(meta["file"]), dtype=dt).reshape(meta["shape"]) \
                .astype(meta["dtype"])
        splits[split] = AlignedBatch([arrays[f"x{m}"] for m in range(M)], arrays["shared"],
                                     [arrays[f"private{m}"] for m in range(M)])
    return Dataset(manifest["kind"], manifest["config"], splits,
                   manifest["n_shared_classes"], manifest["n_private_classes"],
                   manifest["likelihood"])


def config_from_dict(kind, values):
    cls = {"factors": FactorsDatasetConfig, "glyphs": QuadrantGlyphConfig}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {kind} dataset keys: {sorted(unknown)}")
    return cls(**values)


def make_dataset(kind, cfg):
    return make_factors_dataset(cfg) if kind == "factors" else make_quadrant_glyphs(cfg)
