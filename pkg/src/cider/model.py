"""The residual CNN classifier, its training loop and chunked inference."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .augment import AugmentConfig, augment_instance, derive_seed, instance_rng
from .dataset import Instance
from .dsp import FeatureConfig, Standardizer, Waveform, chunk_recording, mfcc
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InferenceError,
    TrainingError,
)
from .evaluation import roc_auc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Network layout: a strided stem convolution followed by residual stages.

    Stage ``i`` holds ``blocks_per_stage[i]`` two-convolution blocks with
    ``stage_channels[i]`` channels; its first block uses ``downsample_strides[i]``.
    The total ``1 + 2 * sum(blocks_per_stage)`` must equal ``n_conv_layers`` (9).
    """

    in_channels: int = 1
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    downsample_strides: tuple[int, ...] = (1, 2, 2, 2)
    kernel_size: int = 3
    stem_kernel: int = 7
    stem_stride: int = 2
    dropout: float = 0.1
    n_conv_layers: int = 9

    def __post_init__(self):
        for name in ("stage_channels", "blocks_per_stage", "downsample_strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_conv_layers != 9:
            raise ConfigError(f"the network has 9 convolution layers, got n_conv_layers={self.n_conv_layers}")
        n = len(self.stage_channels)
        if not n or len(self.blocks_per_stage) != n or len(self.downsample_strides) != n:
            raise ConfigError("stage_channels, blocks_per_stage and downsample_strides must align")
        if 1 + 2 * sum(self.blocks_per_stage) != self.n_conv_layers:
            raise ConfigError(
                f"layout has {1 + 2 * sum(self.blocks_per_stage)} conv layers, expected {self.n_conv_layers}"
            )
        if any(b < 1 for b in self.blocks_per_stage) or any(s < 1 for s in self.downsample_strides):
            raise ConfigError("blocks and strides must be >= 1")
        if list(self.stage_channels) != sorted(self.stage_channels) or min(self.stage_channels) < 1:
            raise ConfigError("stage_channels must be positive and nondecreasing")
        if self.in_channels < 1 or self.kernel_size < 1 or not 0 <= self.dropout < 1:
            raise ConfigError("invalid in_channels, kernel_size or dropout")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    positive_class_weight: float | None = None  # None: n_neg / n_pos of the train split
    seed: int = 0
    early_stop_metric: str = "val_auc"
    patience: int = 15

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.patience < 1:
            raise ConfigError("epochs, batch_size, learning_rate and patience must be positive")
        if self.positive_class_weight is not None and self.positive_class_weight <= 0:
            raise ConfigError("positive_class_weight must be positive")
        if self.early_stop_metric != "val_auc":
            raise ConfigError("only early_stop_metric='val_auc' is supported")

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, k):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, k, padding=k // 2, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out)
            )

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class CIdeRNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0 = cfg.stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c0, cfg.stem_kernel, stride=cfg.stem_stride,
                      padding=cfg.stem_kernel // 2, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(),
        )
        blocks = []
        c_in = c0
        for c_out, n_blocks, stride in zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.downsample_strides):
            for b in range(n_blocks):
                blocks.append(ResidualBlock(c_in, c_out, stride if b == 0 else 1, cfg.kernel_size))
                c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(c_in, 1)

    def forward(self, x):
        x = self.pool(self.blocks(self.stem(x))).flatten(1)
        return self.fc(self.dropout(x)).squeeze(1)


@dataclass
class Model:
    net: CIdeRNet
    config: ModelConfig
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    modality_set: tuple[str, ...] = ()
    standardizer: Standardizer | None = None

    def eval(self):
        self.net.eval()
        return self


def init_model(cfg: ModelConfig, seed: int = 0, feature_config: FeatureConfig | None = None,
               modality_set: Sequence[str] = ()) -> Model:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CIdeRNet(cfg)
    return Model(net, cfg, feature_config or FeatureConfig(), tuple(modality_set))


def _as_batch(batch, dtype) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch.to(dtype)
    return torch.as_tensor(np.stack([np.asarray(b) for b in batch]), dtype=dtype)


def forward(m: Model, batch) -> np.ndarray:
    """Evaluation-mode logits for a batch of ``(n_modalities, n_mfcc, n_frames)`` stacks."""
    dtype = next(m.net.parameters()).dtype
    x = _as_batch(batch, dtype)
    if x.ndim != 4 or x.shape[1] != m.config.in_channels:
        raise InferenceError(
            f"expected stacks with {m.config.in_channels} modalities, got batch shape {tuple(x.shape)}"
        )
    m.net.eval()
    with torch.no_grad():
        return m.net(x).double().numpy()


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, pos_weight: float) -> torch.Tensor:
    pw = torch.as_tensor(pos_weight, dtype=logits.dtype)
    return nn.functional.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), pos_weight=pw)


# -- chunked inference ------------------------------------------------------------

def chunk_stacks(waveforms: Sequence[Waveform | None], cfg: FeatureConfig,
                 standardizer: Standardizer | None = None) -> np.ndarray:
    """Evaluation features: one ``(M, n_mfcc, n_frames)`` stack per chunk index.

    Modalities with fewer chunks repeat their last chunk; absent modalities
    (``None``) are zero planes.
    """
    present = [w for w in waveforms if w is not None]
    if not present:
        raise InferenceError("instance has no recordings")
    if any(len(w) == 0 for w in present):
        raise InferenceError("cannot score an empty recording")
    planes = []
    for w in waveforms:
        planes.append(None if w is None else [mfcc(c, cfg) for c in chunk_recording(w, cfg)])
    k = max(len(p) for p in planes if p is not None)
    shape = (cfg.n_mfcc, cfg.n_frames())
    stacks = np.zeros((k, len(waveforms)) + shape)
    for mi, p in enumerate(planes):
        if p is None:
            continue
        for ci in range(k):
            plane = p[min(ci, len(p) - 1)]
            if standardizer is not None:
                plane = standardizer.apply_plane(plane, mi)
            stacks[ci, mi] = plane
    return stacks


def score_from_logits(logits) -> float:
    """Recording score: sigmoid of the mean chunk logit."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise InferenceError("no chunk logits to aggregate")
    return float(sigmoid(logits.mean()))


def chunk_logits(m: Model, waveforms: Sequence[Waveform | None], cfg: FeatureConfig | None = None) -> np.ndarray:
    cfg = cfg or m.feature_config
    return forward(m, chunk_stacks(waveforms, cfg, m.standardizer))


def predict_recording(m: Model, waveforms: Sequence[Waveform | None], cfg: FeatureConfig | None = None) -> float:
    """Probability for one instance from the mean logit over its s-second chunks."""
    return score_from_logits(chunk_logits(m, waveforms, cfg))


def predict_instances(m: Model, instances: Sequence[Instance]) -> np.ndarray:
    return np.array([predict_recording(m, inst.waveforms) for inst in instances])


# -- training ---------------------------------------------------------------------

def fit_standardizer(instances: Sequence[Instance], cfg: FeatureConfig) -> Standardizer:
    """Per-modality coefficient statistics over every evaluation chunk of the training set.

    Zero-filled (absent) modalities do not contribute.
    """
    n_mod = len(instances[0].waveforms)
    stats = []
    for mi in range(n_mod):
        planes = [
            mfcc(c, cfg)[None]
            for inst in instances if inst.waveforms[mi] is not None
            for c in chunk_recording(inst.waveforms[mi], cfg)
        ]
        if not planes:
            raise TrainingError(f"modality index {mi} has no training recordings")
        stats.append(Standardizer.fit(planes))
    return Standardizer(np.concatenate([s.mean for s in stats]), np.concatenate([s.std for s in stats]))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float

    def to_dict(self):
        return asdict(self)


def train(m: Model, train_set: Sequence[Instance], val_set: Sequence[Instance], tc: TrainConfig,
          augment_cfg: AugmentConfig | None = None, progress=None) -> tuple[Model, list[EpochRecord]]:
    """Fit with class-weighted BCE and Adam; keep the parameters of the best-val-AUC epoch.

    A fresh random window (and augmentation draw) is taken from every training
    instance each epoch, seeded by ``(tc.seed, instance_id, epoch)``.
    """
    augment_cfg = augment_cfg or AugmentConfig()
    cfg = m.feature_config
    y_train = np.array([inst.label for inst in train_set])
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and val splits must be nonempty")
    if any(y is None for y in y_train) or len(set(y_train.tolist())) < 2:
        raise TrainingError("the training split must contain labeled examples of both classes")
    y_val = np.array([inst.label for inst in val_set])
    if any(y is None for y in y_val) or len(set(y_val.tolist())) < 2:
        raise TrainingError("the validation split must contain labeled examples of both classes")

    n_pos = int(y_train.sum())
    pos_weight = tc.positive_class_weight or (len(y_train) - n_pos) / n_pos

    m.standardizer = fit_standardizer(train_set, cfg)
    val_stacks = [chunk_stacks(inst.waveforms, cfg, m.standardizer) for inst in val_set]

    net = m.net
    dtype = next(net.parameters()).dtype
    opt = torch.optim.Adam(net.parameters(), lr=tc.learning_rate)
    history: list[EpochRecord] = []
    best_auc, best_state, stale = -math.inf, None, 0

    for epoch in range(tc.epochs):
        order = np.random.default_rng(derive_seed(tc.seed, "__order__", epoch)).permutation(len(train_set))
        torch.manual_seed(derive_seed(tc.seed, "__torch__", epoch) % 2**63)
        net.train()
        total, count = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            x = np.stack([
                augment_instance(train_set[i].waveforms, cfg, augment_cfg,
                                 instance_rng(tc.seed, train_set[i].instance_id, epoch), m.standardizer)
                for i in idx
            ])
            xb = torch.as_tensor(x, dtype=dtype)
            yb = torch.as_tensor(y_train[idx].astype(np.float64), dtype=dtype)
            loss = weighted_bce(net(xb), yb, pos_weight)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)

        scores = [score_from_logits(forward(m, s)) for s in val_stacks]
        val_auc = roc_auc(scores, y_val)
        rec = EpochRecord(epoch, total / count, val_auc)
        history.append(rec)
        log.info("epoch %d loss %.4f val_auc %.4f", epoch, rec.train_loss, val_auc)
        if progress is not None:
            progress(rec)
        if val_auc > best_auc:
            best_auc, best_state, stale = val_auc, copy.deepcopy(net.state_dict()), 0
        else:
            stale += 1
            if stale >= tc.patience:
                break

    net.load_state_dict(best_state)
    net.eval()
    return m, history


# -- checkpoints -------------------------------------------------------------------

_META_KEY = "__meta__"


def _checkpoint_digest(meta: dict, arrays: dict) -> str:
    h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(m: Model, path, extra: dict | None = None) -> str:
    """Write parameters, configs and normalization statistics to one ``.npz`` file."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in m.net.state_dict().items()}
    if m.standardizer is not None:
        arrays["norm/mean"] = m.standardizer.mean
        arrays["norm/std"] = m.standardizer.std
    meta = {
        "format": "cider-checkpoint/1",
        "model_config": m.config.to_dict(),
        "feature_config": m.feature_config.to_dict(),
        "modality_set": list(m.modality_set),
        "dtype": str(next(m.net.parameters()).dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    meta["hash"] = _checkpoint_digest(meta, arrays)
    buf = io.BytesIO()
    np.savez(buf, **arrays, **{_META_KEY: np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)})
    Path(path).write_bytes(buf.getvalue())
    return meta["hash"]


def read_checkpoint(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc
    if _META_KEY not in arrays:
        raise DataError(f"{path}: not a checkpoint")
    meta = json.loads(arrays.pop(_META_KEY).tobytes())
    stored = meta.pop("hash", None)
    if stored != _checkpoint_digest(meta, arrays):
        raise DataError(f"{path}: checkpoint hash mismatch")
    meta["hash"] = stored
    return meta, arrays


def load_checkpoint(path) -> Model:
    meta, arrays = read_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    m = init_model(cfg, 0, FeatureConfig(**meta["feature_config"]), meta["modality_set"])
    if meta.get("dtype") == "float64":
        m.net.double()
    state = {k[len("param/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")}
    m.net.load_state_dict(state)
    if "norm/mean" in arrays:
        m.standardizer = Standardizer(arrays["norm/mean"], arrays["norm/std"])
    m.net.eval()
    return m
