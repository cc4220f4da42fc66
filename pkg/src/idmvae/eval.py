"""Evaluation protocols: latent linear probes, generative coherence, projections.

Latent classification fits multinomial logistic regression on posterior
samples (or means) of the training split and reports test accuracy, averaged
over modalities, for ``z -> shared``, ``z -> private``, ``w -> private`` and
``w -> shared``. Coherence classifies generated samples with reference
classifiers trained on the original data.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import ConfigError, GateError, InputError
from .model import mlp

GATE_ACCURACY = 0.98


# ---------------------------------------------------------------------------
# linear probes


@dataclass
class LinearProbe:
    weight: np.ndarray  # (classes, features)
    bias: np.ndarray
    classes: np.ndarray

    def logits(self, features):
        return np.asarray(features, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, features):
        return self.classes[self.logits(features).argmax(1)]

    def accuracy(self, features, labels):
        return float(np.mean(self.predict(features) == np.asarray(labels)))


def fit_linear_probe(features, labels, reg=1e-4, max_epochs=500, tol=1e-5):
    """Multinomial logistic regression by full-batch L-BFGS.

    Minimizes mean cross-entropy plus ``reg * ||W||^2`` (bias unpenalized)
    until the gradient norm drops below ``tol`` or ``max_epochs`` iterations.
    Starts from zero, so the result is deterministic.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise InputError("features must be (n, d) with one label per row")
    if not np.isfinite(X).all():
        raise InputError("features must be finite")
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise InputError("need at least two classes to fit a probe")
    n, d = X.shape
    C = len(classes)
    Y = np.eye(C)[yi]

    def objective(theta):
        W = theta[:C * d].reshape(C, d)
        b = theta[C * d:]
        logits = X @ W.T + b
        lse = logsumexp(logits, axis=1)
        loss = np.mean(lse - (logits * Y).sum(1)) + reg * np.sum(W * W)
        P = np.exp(logits - lse[:, None])
        G = (P - Y) / n
        gW = G.T @ X + 2 * reg * W
        gb = G.sum(0)
        return loss, np.concatenate([gW.ravel(), gb])

    res = minimize(objective, np.zeros(C * d + C), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_epochs, "gtol": tol, "ftol": 0.0})
    W = res.x[:C * d].reshape(C, d)
    return LinearProbe(W, res.x[C * d:], classes)


# ---------------------------------------------------------------------------
# encoding helpers


@torch.no_grad()
def encode_split(model, batch, noise=None, use_samples=True, chunk=2048):
    """Per-modality ``(z_features, w_features)`` arrays for an :class:`AlignedBatch`."""
    out = []
    for m, x in enumerate(batch.xs):
        zs, ws = [], []
        for i in range(0, len(x), chunk):
            qz, qw = model.encode(m, torch.as_tensor(x[i:i + chunk], dtype=model.dtype))
            if use_samples:
                zs.append(qz.sample(noise.normal(qz.mean.shape, dtype=model.dtype)))
                ws.append(qw.sample(noise.normal(qw.mean.shape, dtype=model.dtype)))
            else:
                zs.append(qz.mean)
                ws.append(qw.mean)
        out.append((torch.cat(zs).numpy(), torch.cat(ws).numpy()))
    return out


def latent_classification(model, dataset, noise=None, use_samples=True,
                          train_split="train", test_split="test", reg=1e-4):
    """Four probe accuracies averaged over modalities, plus chance levels."""
    if use_samples and noise is None:
        raise InputError("posterior sampling needs a noise source")
    train, test = dataset[train_split], dataset[test_split]
    enc_train = encode_split(model, train, noise, use_samples)
    enc_test = encode_split(model, test, noise, use_samples)
    acc = {"z_shared": [], "z_private": [], "w_private": [], "w_shared": []}
    for m in range(dataset.n_modalities):
        (ztr, wtr), (zte, wte) = enc_train[m], enc_test[m]
        targets = {
            "z_shared": (ztr, train.shared, zte, test.shared),
            "z_private": (ztr, train.private[m], zte, test.private[m]),
            "w_private": (wtr, train.private[m], wte, test.private[m]),
            "w_shared": (wtr, train.shared, wte, test.shared),
        }
        for key, (ftr, ytr, fte, yte) in targets.items():
            acc[key].append(fit_linear_probe(ftr, ytr, reg=reg).accuracy(fte, yte))
    result = {k: float(np.mean(v)) for k, v in acc.items()}
    result["chance_shared"] = 1.0 / dataset.n_shared_classes
    result["chance_private"] = 1.0 / dataset.n_private_classes
    return result


# ---------------------------------------------------------------------------
# reference classifiers


class ReferenceClassifier(nn.Module):
    def __init__(self, input_dim, n_classes, hidden=128):
        super().__init__()
        self.input_dim, self.n_classes, self.hidden = input_dim, n_classes, hidden
        self.net = mlp(input_dim, hidden, n_classes)

    def forward(self, x):
        return self.net(x)

    @torch.no_grad()
    def predict(self, x):
        x = torch.as_tensor(x, dtype=torch.float32)
        return self.net(x).argmax(-1).numpy()


@dataclass
class ReferenceSet:
    shared: list
    private: list
    val_accuracy: dict = field(default_factory=dict)


def _fit_classifier(x, y, n_classes, seed, epochs=30, batch_size=128, lr=1e-3):
    torch.manual_seed(seed)
    clf = ReferenceClassifier(x.shape[1], n_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    X = torch.as_tensor(x, dtype=torch.float32)
    Y = torch.as_tensor(y, dtype=torch.long)
    g = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(len(X), generator=g)
        for i in range(0, len(X), batch_size):
            idx = perm[i:i + batch_size]
            loss = nn.functional.cross_entropy(clf(X[idx]), Y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf


def train_reference_classifiers(dataset, gate=GATE_ACCURACY, seed=0, epochs=30):
    """Per-modality shared- and private-label MLPs, gated on validation accuracy."""
    train, val = dataset["train"], dataset["val"]
    shared, private, accs = [], [], {}
    for m in range(dataset.n_modalities):
        for kind, labels_tr, labels_val, C, store in (
                ("shared", train.shared, val.shared, dataset.n_shared_classes, shared),
                ("private", train.private[m], val.private[m], dataset.n_private_classes, private)):
            clf = _fit_classifier(train.xs[m], labels_tr, C, seed=seed + 31 * m, epochs=epochs)
            acc = float(np.mean(clf.predict(val.xs[m]) == labels_val))
            accs[f"{kind}{m}"] = acc
            if acc < gate:
                raise GateError(
                    f"reference classifier for {kind} labels of modality {m} reached "
                    f"validation accuracy {acc:.4f} < gate {gate}")
            store.append(clf)
    return ReferenceSet(shared, private, accs)


# ---------------------------------------------------------------------------
# generative coherence


@torch.no_grad()
def sample_z_prior(model, diffusion, n, noise):
    """Shared-latent prior draws: diffusion sampler when available, else N(0, I)."""
    if diffusion is not None:
        return diffusion.sample(n, noise).to(model.dtype)
    return noise.normal((n, model.latent.d_z), dtype=model.dtype)


def _check_refs(refs, model):
    if refs is None or len(refs.shared) != model.n_modalities:
        raise ConfigError("reference classifiers missing or built for another modality count")
    failed = {k: v for k, v in refs.val_accuracy.items() if v < GATE_ACCURACY}
    if failed:
        raise ConfigError(f"reference classifiers failed the accuracy gate: {failed}")


@torch.no_grad()
def conditional_coherence(model, refs, batch, s, t, z_source="posterior", w_source="prior",
                          n=None, noise=None, diffusion=None):
    """Generate modality ``t`` from chosen latent sources and classify it.

    ``z`` comes from ``q(z | x_s)`` or the prior; ``w_t`` from ``q(w_t | x_t)``
    (same datum) or ``N(0, I)``. Returns the accuracies of the reference
    classifiers against the datum's shared label and modality-``t`` private
    label; Table-style arrows are applied by the reader.
    """
    _check_refs(refs, model)
    M = model.n_modalities
    if not (0 <= s < M and 0 <= t < M):
        raise InputError(f"modality indices ({s}, {t}) out of range")
    for src in (z_source, w_source):
        if src not in ("posterior", "prior"):
            raise InputError(f"latent source must be 'posterior' or 'prior', got {src!r}")
    n = len(batch) if n is None else min(n, len(batch))
    xs = batch.tensors(model.dtype)
    if z_source == "posterior":
        qz, _ = model.encode(s, xs[s][:n])
        z = qz.sample(noise.normal(qz.mean.shape, dtype=model.dtype))
    else:
        z = sample_z_prior(model, diffusion, n, noise)
    if w_source == "posterior":
        _, qw = model.encode(t, xs[t][:n])
        w = qw.sample(noise.normal(qw.mean.shape, dtype=model.dtype))
    else:
        w = noise.normal((n, model.latent.d_w), dtype=model.dtype)
    x_gen = model.likelihood_mean(t, model.decode(t, z, w))
    shared_acc = float(np.mean(refs.shared[t].predict(x_gen) == batch.shared[:n]))
    private_acc = float(np.mean(refs.private[t].predict(x_gen) == batch.private[t][:n]))
    return shared_acc, private_acc


@torch.no_grad()
def unconditional_coherence(model, refs, n, noise, diffusion=None):
    """Fraction of prior draws whose M generated views all get the same shared label."""
    _check_refs(refs, model)
    z = sample_z_prior(model, diffusion, n, noise)
    preds = []
    for m in range(model.n_modalities):
        w = noise.normal((n, model.latent.d_w), dtype=model.dtype)
        preds.append(refs.shared[m].predict(model.likelihood_mean(m, model.decode(m, z, w))))
    preds = np.stack(preds)
    return float(np.mean((preds == preds[0]).all(0)))


def null_coherence(class_probs, n_modalities):
    """All-agree probability when every view's label is drawn independently."""
    q = np.asarray(class_probs, dtype=np.float64)
    return float(np.sum(q ** n_modalities))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    latent: dict
    self_gen: dict
    cross_gen: dict
    unconditional: float
    chance: dict
    pairs: list = field(default_factory=list)
    reference_val_accuracy: dict = field(default_factory=dict)

    SCHEMA_VERSION = 1

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = self.SCHEMA_VERSION
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def coherence_rows(self):
        """Rows mirroring the generative-coherence table layout."""
        return [
            {"row": "self-gen", "source": "z_q,w_p", "shared": self.self_gen["z_q_w_p"]["shared"],
             "private": self.self_gen["z_q_w_p"]["private"], "shared_dir": "up", "private_dir": "down"},
            {"row": "self-gen", "source": "z_p,w_q", "shared": self.self_gen["z_p_w_q"]["shared"],
             "private": self.self_gen["z_p_w_q"]["private"], "shared_dir": "down", "private_dir": "up"},
            {"row": "cross-gen", "source": "z_q,w_p", "shared": self.cross_gen["z_q_w_p"]["shared"],
             "private": self.cross_gen["z_q_w_p"]["private"], "shared_dir": "up", "private_dir": "down"},
            {"row": "uncond", "source": "z_p,w_p", "shared": self.unconditional,
             "private": "", "shared_dir": "up", "private_dir": ""},
        ]

    def latent_rows(self):
        return [{"metric": k, "accuracy": self.latent[k]}
                for k in ("z_shared", "z_private", "w_private", "w_shared")]

    def tables_csv(self):
        """``(latent_csv, coherence_csv)`` strings."""
        return _to_csv(self.latent_rows()), _to_csv(self.coherence_rows())


REPORT_SCHEMA = {
    "type": "object",
    "required": ["latent", "self_gen", "cross_gen", "unconditional", "chance", "schema_version"],
    "properties": {
        "latent": {"type": "object",
                   "required": ["z_shared", "z_private", "w_private", "w_shared"],
                   "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "self_gen": {"type": "object", "required": ["z_q_w_p", "z_p_w_q"]},
        "cross_gen": {"type": "object", "required": ["z_q_w_p"]},
        "unconditional": {"type": "number", "minimum": 0, "maximum": 1},
        "chance": {"type": "object", "required": ["shared", "private", "unconditional_null"]},
        "schema_version": {"const": 1},
    },
}


def _to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def evaluate(model, dataset, refs, noise, diffusion=None, split="test", n=2000,
             use_samples=True):
    """Run every protocol and collect a :class:`MetricsReport`."""
    model.eval()
    latent = latent_classification(model, dataset, noise, use_samples, test_split=split)
    batch = dataset[split]
    M = model.n_modalities
    pairs = []
    for s in range(M):
        for t in range(M):
            sources = [("posterior", "prior")]
            if s == t:
                sources.append(("prior", "posterior"))
            for zs, ws in sources:
                sh, pr = conditional_coherence(model, refs, batch, s, t, zs, ws, n, noise, diffusion)
                pairs.append({"s": s, "t": t, "z": zs, "w": ws, "shared": sh, "private": pr})

    def avg(sel):
        rows = [p for p in pairs if sel(p)]
        return {"shared": float(np.mean([p["shared"] for p in rows])),
                "private": float(np.mean([p["private"] for p in rows]))}

    self_gen = {"z_q_w_p": avg(lambda p: p["s"] == p["t"] and p["z"] == "posterior"),
                "z_p_w_q": avg(lambda p: p["s"] == p["t"] and p["z"] == "prior")}
    cross_gen = {"z_q_w_p": avg(lambda p: p["s"] != p["t"])}
    uncond = unconditional_coherence(model, refs, n, noise, diffusion)
    counts = np.bincount(dataset["train"].shared, minlength=dataset.n_shared_classes)
    chance = {"shared": 1.0 / dataset.n_shared_classes,
              "private": 1.0 / dataset.n_private_classes,
              "unconditional_null": null_coherence(counts / counts.sum(), M)}
    return MetricsReport(latent, self_gen, cross_gen, uncond, chance, pairs,
                         dict(refs.val_accuracy))


# ---------------------------------------------------------------------------
# projection


@dataclass
class Projection:
    coords: np.ndarray  # (n_posterior + n_prior, 2)
    labels: np.ndarray  # shared label, -1 for prior rows
    kinds: list  # "posterior" | "prior"
    components: np.ndarray  # (2, d_z), orthonormal rows
    explained_variance_ratio: float

    def to_csv(self):
        rows = [{"pc1": f"{c[0]:.6g}", "pc2": f"{c[1]:.6g}", "label": int(l), "kind": k}
                for c, l, k in zip(self.coords, self.labels, self.kinds)]
        return _to_csv(rows)


@torch.no_grad()
def latent_projection(model, batch, n, noise, diffusion=None, modality=0, n_prior=None):
    """PCA of ``q(z | x_modality)`` means with prior draws projected alongside."""
    n = min(n, len(batch))
    n_prior = n if n_prior is None else n_prior
    qz, _ = model.encode(modality, batch.tensors(model.dtype)[modality][:n])
    means = qz.mean.double().numpy()
    center = means.mean(0)
    _, svals, vt = np.linalg.svd(means - center, full_matrices=False)
    components = vt[:2]
    ratio = float(np.sum(svals[:2] ** 2) / max(np.sum(svals ** 2), 1e-300))
    prior = sample_z_prior(model, diffusion, n_prior, noise).double().numpy()
    coords = np.concatenate([(means - center) @ components.T, (prior - center) @ components.T])
    labels = np.concatenate([batch.shared[:n], -np.ones(n_prior, dtype=np.int64)])
    kinds = ["posterior"] * n + ["prior"] * n_prior
    return Projection(coords, labels, kinds, components, ratio)
