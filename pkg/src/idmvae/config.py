"""Experiment configuration: dataset, model, loss and training sections."""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .data import FactorsDatasetConfig, QuadrantGlyphConfig, config_from_dict
from .errors import ConfigError
from .objectives import LossConfig

OUT_ENV = "IDMVAE_OUT"


@dataclass(frozen=True)
class ModelConfig:
    d_z: int = 8
    d_w: int = 16
    hidden: int = 128
    separate_encoders: bool = True
    decoder_sigma: float = 1.0
    diffusion_steps: int = 100
    diffusion_beta_start: float = 1e-4
    diffusion_beta_end: float = 0.02
    diffusion_hidden: int = 128
    modalities: tuple = ()  # optional explicit ModalitySpec dicts, checked against the data

    def __post_init__(self):
        if min(self.d_z, self.d_w, self.hidden, self.diffusion_steps, self.diffusion_hidden) < 1:
            raise ConfigError("model sizes must be positive")
        if not self.decoder_sigma > 0:
            raise ConfigError("decoder_sigma must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    diffusion_learning_rate: float = None  # defaults to learning_rate
    grad_clip: float = 10.0
    seed: int = 0
    eval_every: int = 0  # epochs; 0 evaluates only at the end
    log_every: int = 1  # steps
    checkpoint_dir: str = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not self.learning_rate > 0 or not self.grad_clip > 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        if self.eval_every < 0 or self.log_every < 1:
            raise ConfigError("eval_every must be >= 0 and log_every >= 1")
        if self.batch_size <= self.loss.k_negatives:
            raise ConfigError(
                f"batch_size={self.batch_size} must exceed k_negatives={self.loss.k_negatives}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_kind: str = "factors"
    dataset: object = field(default_factory=FactorsDatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        expected = {"factors": FactorsDatasetConfig, "glyphs": QuadrantGlyphConfig}.get(self.dataset_kind)
        if expected is None or not isinstance(self.dataset, expected):
            raise ConfigError(f"dataset section does not match kind {self.dataset_kind!r}")
        if self.model.modalities:
            n = self.dataset.n_modalities
            if len(self.model.modalities) != n:
                raise ConfigError(f"{len(self.model.modalities)} modality specs for {n} modalities")
            dim = self.dataset.input_dim if self.dataset_kind == "factors" else self.dataset.canvas ** 2
            for spec in self.model.modalities:
                if spec.get("input_dim") != dim:
                    raise ConfigError(f"modality input_dim {spec.get('input_dim')} != dataset dim {dim}")

    @property
    def loss(self):
        return self.train.loss

    def to_dict(self):
        d = asdict(self)
        d["train"]["adam_betas"] = list(self.train.adam_betas)
        d["model"]["modalities"] = list(self.model.modalities)
        return d

    def with_loss(self, **changes):
        return replace(self, train=replace(self.train, loss=replace(self.train.loss, **changes)))

    def with_train(self, **changes):
        return replace(self, train=replace(self.train, **changes))

    def with_dataset(self, **changes):
        return replace(self, dataset=replace(self.dataset, **changes))


def _build(cls, values, section):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad {section!r} section: {e}") from e


def experiment_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be a JSON object")
    unknown = set(d) - {"dataset", "model", "loss", "train", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    ds = dict(d.get("dataset") or {})
    kind = ds.pop("kind", "factors")
    dataset = config_from_dict(kind, ds)
    model_d = dict(d.get("model") or {})
    if "modalities" in model_d:
        model_d["modalities"] = tuple(model_d["modalities"])
    model = _build(ModelConfig, model_d, "model")
    loss = _build(LossConfig, d.get("loss"), "loss")
    train_d = dict(d.get("train") or {})
    if "loss" in train_d:
        raise ConfigError("put loss settings in the top-level 'loss' section")
    if "adam_betas" in train_d:
        train_d["adam_betas"] = tuple(train_d["adam_betas"])
    train = _build(TrainConfig, {**train_d, "loss": loss}, "train")
    out = os.environ.get(OUT_ENV) or d.get("output_dir", "runs/default")
    return ExperimentConfig(kind, dataset, model, train, out)


def experiment_to_dict(exp):
    d = exp.to_dict()
    d["dataset"] = {"kind": exp.dataset_kind, **d["dataset"]}
    d["loss"] = d["train"].pop("loss")
    return d


def load_experiment(path):
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return experiment_from_dict(d)
