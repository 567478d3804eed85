"""Classical baselines on recording-level MFCC vectors: LR, MLP and RF.

Each recording becomes the frame-mean of a 39-coefficient MFCC matrix.
Multimodal instances concatenate the per-modality vectors in ``modality_set``
order.
"""
from __future__ import annotations

import pickle
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler

from .dataset import Instance
from .dsp import FeatureConfig, Waveform, mfcc
from .errors import ConfigError, ContractError, DataError, TrainingError
from .evaluation import EvalResult

BASELINE_DIM = 39
BASELINE_KINDS = ("LR", "MLP", "RF")

DEFAULT_HYPERPARAMS = {
    "LR": {"C": 1.0, "max_iter": 1000},
    "MLP": {"hidden_layer_sizes": [25], "activation": "tanh", "alpha": 1e-4,
            "learning_rate_init": 1e-4, "max_iter": 500},
    "RF": {"n_estimators": 50, "criterion": "gini", "max_depth": None},
}


def baseline_feature_config(base: FeatureConfig | None = None) -> FeatureConfig:
    """Same front end as ``base`` but with 39 cepstral coefficients."""
    d = (base or FeatureConfig()).to_dict()
    d["n_mfcc"] = BASELINE_DIM
    return FeatureConfig(**d)


def baseline_features(w: Waveform, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Frame-mean of the MFCC matrix of the whole recording."""
    cfg = cfg or baseline_feature_config()
    return mfcc(w, cfg).mean(axis=1)


def concat_modalities(vectors: Sequence[tuple[str, np.ndarray | None]], modality_set: Sequence[str],
                      policy: str = "drop-incomplete", dim: int = BASELINE_DIM) -> np.ndarray:
    """Concatenate ``(modality, vector)`` pairs, which must follow ``modality_set`` order.

    A ``None`` vector is an absent modality: rejected under ``drop-incomplete``,
    replaced by zeros under ``zero-fill``.
    """
    names = [m for m, _ in vectors]
    if names != list(modality_set):
        raise ContractError(f"modalities {names} do not match the fixed order {list(modality_set)}")
    parts = []
    for m, v in vectors:
        if v is None:
            if policy != "zero-fill":
                raise ContractError(f"missing {m} features under policy {policy!r}")
            v = np.zeros(dim)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (dim,):
            raise ContractError(f"{m} vector has shape {v.shape}, expected ({dim},)")
        parts.append(v)
    return np.concatenate(parts)


def instance_features(inst: Instance, cfg: FeatureConfig, policy: str = "drop-incomplete") -> np.ndarray:
    pairs = [
        (m, None if w is None else baseline_features(w, cfg))
        for m, w in zip(inst.modality_set, inst.waveforms)
    ]
    return concat_modalities(pairs, inst.modality_set, policy, cfg.n_mfcc)


def feature_table(instances: Sequence[Instance], cfg: FeatureConfig, policy: str = "drop-incomplete"):
    X = np.stack([instance_features(inst, cfg, policy) for inst in instances])
    y = [inst.label for inst in instances]
    return X, y


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")

    @property
    def hyperparameters(self) -> dict:
        return {**DEFAULT_HYPERPARAMS[self.kind], **self.params}

    def to_dict(self):
        return {"kind": self.kind, "params": self.hyperparameters}


def _make_estimator(spec: BaselineSpec, seed: int):
    hp = spec.hyperparameters
    if spec.kind == "LR":
        return make_pipeline(StandardScaler(), LogisticRegression(penalty="l2", random_state=seed, **hp))
    if spec.kind == "MLP":
        hp = {**hp, "hidden_layer_sizes": tuple(hp["hidden_layer_sizes"])}
        return make_pipeline(StandardScaler(), MLPClassifier(solver="adam", random_state=seed, **hp))
    return RandomForestClassifier(random_state=seed, n_jobs=1, **hp)


@dataclass
class BaselineModel:
    spec: BaselineSpec
    estimator: object
    feature_config: FeatureConfig
    seed: int

    @property
    def classifier(self):
        return self.estimator[-1] if isinstance(self.estimator, Pipeline) else self.estimator

    def predict_proba(self, X) -> np.ndarray:
        """Probability of the positive class for each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        proba = self.estimator.predict_proba(X)
        return proba[:, list(self.classifier.classes_).index(1)]

    def save(self, path, config_hash: str | None = None) -> None:
        with open(path, "wb") as fh:
            pickle.dump({"spec": self.spec.to_dict(), "feature_config": self.feature_config.to_dict(),
                         "feature_config_hash": self.feature_config.config_hash(),
                         "config_hash": config_hash, "seed": self.seed, "estimator": self.estimator}, fh)

    @classmethod
    def load(cls, path) -> "BaselineModel":
        with open(path, "rb") as fh:
            d = pickle.load(fh)
        cfg = FeatureConfig(**d["feature_config"])
        if cfg.config_hash() != d["feature_config_hash"]:
            raise DataError(f"{path}: feature config hash mismatch")
        return cls(BaselineSpec(d["spec"]["kind"], d["spec"]["params"]), d["estimator"], cfg, d["seed"])


def train_baseline(spec: BaselineSpec, features, labels, seed: int = 0,
                   feature_config: FeatureConfig | None = None) -> BaselineModel:
    X = np.asarray(features, dtype=np.float64)
    if any(v is None for v in labels):
        raise TrainingError("baselines cannot train on blind labels")
    y = np.asarray(labels, dtype=int)
    if len(np.unique(y)) < 2:
        raise TrainingError("baseline training data must contain both classes")
    est = _make_estimator(spec, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        est.fit(X, y)
    return BaselineModel(spec, est, feature_config or baseline_feature_config(), seed)


def evaluate_baseline(model: BaselineModel, instances: Sequence[Instance],
                      policy: str = "drop-incomplete", name: str | None = None) -> EvalResult:
    if any(inst.label is None for inst in instances):
        raise ContractError("blind instances cannot be scored for metrics")
    X, y = feature_table(instances, model.feature_config, policy)
    return EvalResult.from_scores(name or model.spec.kind, model.predict_proba(X), y,
                                  ids=[inst.instance_id for inst in instances])
