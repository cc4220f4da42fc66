import json
import math

import jsonschema
import numpy as np
import pytest
import torch

from idmvae.checkpoint import checkpoint_bytes
from idmvae.config import ModelConfig
from idmvae.data import (
    AlignedBatch, Dataset, FactorsDatasetConfig, QuadrantGlyphConfig, make_factors_dataset,
    make_quadrant_glyphs)
from idmvae.errors import ConfigError, GateError, InputError
from idmvae.eval import (
    REPORT_SCHEMA, ReferenceSet, conditional_coherence, evaluate, fit_linear_probe,
    latent_classification, latent_projection, null_coherence, train_reference_classifiers,
    unconditional_coherence)
from idmvae.noise import NoiseSource, ZeroNoise
from idmvae.objectives import LossConfig
from idmvae.train import build_model

from conftest import toy_model

C, Q = 10, 4  # shared and private class counts of the one-hot fixture


class ArgmaxRef:
    """Stand-in reference classifier: argmax over a fixed column block."""

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi

    def predict(self, x):
        return np.asarray(x)[:, self.lo:self.hi].argmax(1)


def argmax_refs(M, shared=(0, C), private=(C, C + Q), val=1.0):
    return ReferenceSet([ArgmaxRef(*shared) for _ in range(M)], [ArgmaxRef(*private) for _ in range(M)],
                        {f"shared{m}": val for m in range(M)})


def onehot_dataset(M=2, n=400, seed=0):
    """x_m = [onehot(shared); onehot(private_m)], read by the identity toy model."""
    r = np.random.default_rng(seed)

    def split(k):
        shared = r.integers(0, C, k)
        private = [r.integers(0, Q, k) for _ in range(M)]
        xs = [np.concatenate([np.eye(C)[shared], np.eye(Q)[p]], 1) for p in private]
        return AlignedBatch(xs, shared, private)

    splits = {"train": split(n), "val": split(n // 4), "test": split(n)}
    return Dataset("onehot", {}, splits, C, Q, "gaussian")


class TestLinearProbe:
    def test_separable_blobs(self, rng):
        x = np.concatenate([rng.normal(-3, 0.5, (100, 2)), rng.normal(3, 0.5, (100, 2))])
        y = np.repeat([0, 1], 100)
        assert fit_linear_probe(x, y).accuracy(x, y) == 1.0

    def test_random_labels_near_chance(self, rng):
        x = rng.normal(size=(4000, 8))
        y = rng.integers(0, 4, 4000)
        acc = fit_linear_probe(x[:2000], y[:2000]).accuracy(x[2000:], y[2000:])
        assert abs(acc - 0.25) <= 0.05

    def test_duplicates_give_identical_probe(self, rng):
        x = rng.normal(size=(200, 3))
        y = (x[:, 0] + 0.3 * rng.normal(size=200) > 0).astype(int)
        a = fit_linear_probe(x, y)
        b = fit_linear_probe(np.concatenate([x, x]), np.concatenate([y, y]))
        np.testing.assert_allclose(a.weight, b.weight, atol=1e-4)
        assert np.array_equal(a.predict(x), b.predict(x))

    def test_deterministic(self, rng):
        x, y = rng.normal(size=(300, 4)), rng.integers(0, 3, 300)
        a, b = fit_linear_probe(x, y), fit_linear_probe(x, y)
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
        assert np.isfinite(a.weight).all()

    def test_gradient_norm_at_optimum(self, rng):
        # recompute the objective's gradient independently at the returned optimum
        x, y = rng.normal(size=(300, 3)), rng.integers(0, 3, 300)
        p = fit_linear_probe(x, y, reg=1e-2)
        logits = p.logits(x)
        P = np.exp(logits - logits.max(1, keepdims=True))
        P /= P.sum(1, keepdims=True)
        G = (P - np.eye(3)[y]) / len(x)
        g = np.concatenate([(G.T @ x + 2e-2 * p.weight).ravel(), G.sum(0)])
        assert np.linalg.norm(g) < 1e-4

    def test_errors(self, rng):
        with pytest.raises(InputError):
            fit_linear_probe(rng.normal(size=(10, 2)), np.zeros(10))
        with pytest.raises(InputError):
            fit_linear_probe(np.full((4, 2), np.nan), [0, 1, 0, 1])
        with pytest.raises(InputError):
            fit_linear_probe(rng.normal(size=(4, 2)), [0, 1, 0])


class TestLatentClassification:
    def test_onehot_oracle(self):
        model = toy_model(d_z=C, d_w=Q)
        acc = latent_classification(model, onehot_dataset(), use_samples=False)
        assert acc["z_shared"] == 1.0 and acc["w_private"] == 1.0
        assert acc["chance_shared"] == 0.1 and acc["chance_private"] == 0.25

    def test_untrained_model_near_chance(self):
        ds = make_factors_dataset(FactorsDatasetConfig(n_test=2000))
        model, _ = build_model(ds, ModelConfig(), LossConfig(diffusion_weight=0), seed=0)
        acc = latent_classification(model, ds, NoiseSource(0))
        for key, chance in (("z_shared", 0.1), ("z_private", 0.25), ("w_private", 0.25), ("w_shared", 0.1)):
            assert abs(acc[key] - chance) <= 0.1, (key, acc[key])

    def test_samples_need_noise(self):
        with pytest.raises(InputError):
            latent_classification(toy_model(d_z=C, d_w=Q), onehot_dataset(), noise=None)


class TestCoherence:
    def test_reconstruction_is_coherent(self):
        model, ds = toy_model(d_z=C, d_w=Q), onehot_dataset()
        acc = conditional_coherence(model, argmax_refs(2), ds["test"], 0, 0, "posterior", "posterior",
                                    noise=ZeroNoise(0))
        assert acc == (1.0, 1.0)

    def test_prior_prior_is_chance(self):
        n = 2000
        model, ds = toy_model(d_z=C, d_w=Q), onehot_dataset(n=n)
        shared, private = conditional_coherence(model, argmax_refs(2), ds["test"], 0, 1, "prior", "prior",
                                                noise=NoiseSource(3))
        assert abs(shared - 0.1) < 3 * math.sqrt(0.1 * 0.9 / n)
        assert abs(private - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n)

    def test_cross_generation_uses_source_z(self):
        model, ds = toy_model(d_z=C, d_w=Q), onehot_dataset()
        shared, _ = conditional_coherence(model, argmax_refs(2), ds["test"], 0, 1, "posterior", "prior",
                                          noise=ZeroNoise(0))
        assert shared == 1.0

    def test_errors(self):
        model, ds = toy_model(d_z=C, d_w=Q), onehot_dataset()
        with pytest.raises(ConfigError):
            conditional_coherence(model, argmax_refs(2, val=0.9), ds["test"], 0, 0, noise=NoiseSource(0))
        with pytest.raises(ConfigError):
            conditional_coherence(model, argmax_refs(3), ds["test"], 0, 0, noise=NoiseSource(0))
        with pytest.raises(InputError):
            conditional_coherence(model, argmax_refs(2), ds["test"], 0, 2, noise=NoiseSource(0))
        with pytest.raises(InputError):
            conditional_coherence(model, argmax_refs(2), ds["test"], 0, 0, "mean", noise=NoiseSource(0))


class TestNullCoherence:
    def test_closed_form(self):
        assert null_coherence(np.full(10, 0.1), 3) == pytest.approx(0.01, rel=1e-12)
        assert null_coherence([1.0], 4) == 1.0

    def test_decreasing_in_modalities(self):
        q = np.random.default_rng(0).dirichlet(np.ones(10))
        vals = [null_coherence(q, M) for M in range(2, 7)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("M", [2, 3, 5])
    def test_decoders_ignoring_z_match_null(self, M):
        # decoders emit only w, so each view's argmax is an independent uniform label
        d = C
        A = np.concatenate([np.zeros((d, d)), np.eye(d)], 1)
        model = toy_model(M=M, d_z=d, d_w=d, decoder_matrix=A)
        n = 20_000
        got = unconditional_coherence(model, argmax_refs(M), n, NoiseSource(M))
        p = null_coherence(np.full(C, 0.1), M)
        assert abs(got - p) < 3 * math.sqrt(p * (1 - p) / n) + 1e-12

    def test_shared_decoders_always_agree(self):
        model = toy_model(M=3, d_z=C, d_w=Q)
        assert unconditional_coherence(model, argmax_refs(3), 500, NoiseSource(0)) == 1.0


class TestReferenceClassifiers:
    def test_glyph_gate_passes(self):
        ds = make_quadrant_glyphs(QuadrantGlyphConfig(n_train=3000, n_val=500, n_test=100))
        refs = train_reference_classifiers(ds, epochs=10)
        assert len(refs.shared) == 3 and min(refs.val_accuracy.values()) >= 0.98

    def test_factors_gate_passes(self):
        ds = make_factors_dataset(FactorsDatasetConfig(n_test=100))
        refs = train_reference_classifiers(ds)
        assert min(refs.val_accuracy.values()) >= 0.98

    def test_permuted_labels_fail_gate(self):
        ds = make_quadrant_glyphs(QuadrantGlyphConfig(n_train=1000, n_val=300, n_test=10))
        train = ds["train"]
        perm = np.random.default_rng(0).permutation(len(train))
        ds.splits["train"] = AlignedBatch(train.xs, train.shared[perm], train.private)
        with pytest.raises(GateError, match="validation accuracy"):
            train_reference_classifiers(ds, epochs=3)


class TestProjection:
    def test_shape_orthonormal_ratio(self):
        ds = make_factors_dataset(FactorsDatasetConfig(n_train=200, n_val=10, n_test=10))
        model, _ = build_model(ds, ModelConfig(), LossConfig(diffusion_weight=0), seed=0)
        proj = latent_projection(model, ds["train"], 150, NoiseSource(0), n_prior=40)
        assert proj.coords.shape == (190, 2) and len(proj.labels) == 190 and len(proj.kinds) == 190
        np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-9)
        assert 0.0 <= proj.explained_variance_ratio <= 1.0
        assert (proj.labels[150:] == -1).all() and proj.kinds[-1] == "prior"
        assert proj.to_csv().count("\n") == 191

    def test_identity_fixture_recovers_full_variance(self):
        # rank-2 latents: two components explain everything
        model, ds = toy_model(d_z=2, d_w=1), onehot_dataset()
        r = np.random.default_rng(0)
        z = r.normal(size=(100, 2))
        batch = AlignedBatch([np.concatenate([z, np.zeros((100, 1))], 1)] * 2, np.zeros(100, int),
                             [np.zeros(100, int)] * 2)
        proj = latent_projection(model, batch, 100, NoiseSource(0))
        assert proj.explained_variance_ratio == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def small_eval():
    ds = make_quadrant_glyphs(QuadrantGlyphConfig(n_train=600, n_val=300, n_test=200))
    model, diffusion = build_model(ds, ModelConfig(hidden=32, diffusion_hidden=32), LossConfig(), seed=0)
    refs = train_reference_classifiers(ds, epochs=15)
    return ds, model, diffusion, refs


class TestEvaluate:
    def test_does_not_mutate_model(self, small_eval):
        ds, model, diffusion, refs = small_eval
        before = checkpoint_bytes(model, diffusion)
        evaluate(model, ds, refs, NoiseSource(0), diffusion, n=100)
        assert checkpoint_bytes(model, diffusion) == before

    def test_report_schema_and_ranges(self, small_eval):
        ds, model, diffusion, refs = small_eval
        report = evaluate(model, ds, refs, NoiseSource(0), diffusion, n=100)
        doc = json.loads(report.to_json())
        jsonschema.validate(doc, REPORT_SCHEMA)
        values = list(doc["latent"].values()) + [doc["unconditional"]]
        values += [p[k] for p in doc["pairs"] for k in ("shared", "private")]
        assert all(0.0 <= v <= 1.0 for v in values)
        # 3 x 3 cross/self cells plus one prior-z cell per diagonal
        assert len(doc["pairs"]) == 9 + 3
        assert doc["chance"]["unconditional_null"] == pytest.approx(0.01, abs=0.002)

    def test_tables_csv(self, small_eval):
        ds, model, diffusion, refs = small_eval
        latent_csv, coh_csv = evaluate(model, ds, refs, NoiseSource(0), diffusion, n=50).tables_csv()
        rows = coh_csv.strip().split("\n")
        assert rows[0] == "row,source,shared,private,shared_dir,private_dir"
        assert [r.split(",")[0] for r in rows[1:]] == ["self-gen", "self-gen", "cross-gen", "uncond"]
        assert latent_csv.startswith("metric,accuracy\nz_shared,")

    def test_report_rejects_out_of_range(self):
        bad = {"latent": {"z_shared": 1.5, "z_private": 0, "w_private": 0, "w_shared": 0},
               "self_gen": {"z_q_w_p": {}, "z_p_w_q": {}}, "cross_gen": {"z_q_w_p": {}},
               "unconditional": 0.5, "chance": {"shared": 0.1, "private": 0.25, "unconditional_null": 0.01},
               "schema_version": 1}
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(bad, REPORT_SCHEMA)

    def test_deterministic(self, small_eval):
        ds, model, diffusion, refs = small_eval
        a = evaluate(model, ds, refs, NoiseSource(5), diffusion, n=50).to_json()
        b = evaluate(model, ds, refs, NoiseSource(5), diffusion, n=50).to_json()
        assert a == b
