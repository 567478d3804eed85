"""End-to-end runs: train on train, select on val, score test exactly once."""
from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Sequence

import torch

from .baselines import BaselineSpec, baseline_feature_config, evaluate_baseline, feature_table, train_baseline
from .config import ExperimentConfig
from .dataset import DatasetManifest, Instance, group_instances, load_instances, load_manifest
from .dsp import load_audio
from .errors import CiderError, ConfigError, DataError, ParameterError
from .evaluation import EvalResult, compare_models, cross_matrix
from .model import Model, init_model, load_checkpoint, predict_instances, predict_recording, save_checkpoint, train

log = logging.getLogger(__name__)

REPORT_SCHEMA = "cider-report/1"
CROSS_SCHEMA = "cider-cross/1"


def set_deterministic(flag: bool = True) -> None:
    """Single-threaded, deterministic torch kernels."""
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


class Staging:
    """Collects output files in a temporary directory and moves them into place on commit."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))

    def path(self, name: str) -> Path:
        return self.tmp / name

    def commit(self) -> list[Path]:
        moved = []
        for p in sorted(self.tmp.iterdir()):
            dest = self.out_dir / p.name
            os.replace(p, dest)
            moved.append(dest)
        self.discard()
        return moved

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_sidecar(path, cfg_hash: str, seed: int) -> None:
    """``<file>.meta.json`` carrying the config hash, seed and content digest."""
    meta = {"file": Path(path).name, "sha256": file_digest(path), "config_hash": cfg_hash, "seed": seed}
    Path(str(path) + ".meta.json").write_text(dumps_json(meta), encoding="utf-8")


# -- helpers ----------------------------------------------------------------------

def _split_summary(manifest: DatasetManifest, policy: str) -> dict:
    out = {}
    for split in ("train", "val", "test"):
        groups = group_instances(manifest, split, policy)
        labels = [g.label for g in groups]
        out[split] = {lab: labels.count(lab) for lab in ("positive", "negative", "blind")}
    return out


def _check_splits(summary: dict) -> None:
    if sum(summary["val"].values()) == 0:
        raise ConfigError("validation split is empty; model selection needs it")
    if sum(summary["train"].values()) == 0:
        raise ConfigError("training split is empty")
    if min(summary["val"]["positive"], summary["val"]["negative"]) == 0:
        raise ConfigError("validation split needs both classes for AUC-based selection")


def _model_config_for(cfg: ExperimentConfig, modality_set) -> ExperimentConfig:
    model = dataclasses.replace(cfg.model, in_channels=len(modality_set))
    tc = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg.replace(model=model, train=tc)


def train_cider(cfg: ExperimentConfig, train_set, val_set, modality_set) -> tuple[Model, list]:
    cfg = _model_config_for(cfg, modality_set)
    m = init_model(cfg.model, cfg.seed, cfg.feature, modality_set)
    return train(m, train_set, val_set, cfg.train, cfg.augment)


def _labeled(instances: Sequence[Instance]) -> bool:
    return all(inst.label is not None for inst in instances)


def format_predictions(ids: Sequence[str], probs: Sequence[float]) -> str:
    if len(set(ids)) != len(ids):
        raise DataError("instance id collision in prediction output")
    lines = [f"{i} {p:.6f}" for i, p in sorted(zip(ids, probs), key=lambda t: t[0])]
    return "".join(line + "\n" for line in lines)


# -- single experiment ------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, deterministic: bool = True) -> dict:
    """Train CIdeR and the baselines, select on val, evaluate once on test, write the report.

    Outputs in ``cfg.out_dir``: ``report.json``, ``model.ckpt``,
    ``baseline_<KIND>.pkl`` and ``predictions_test.txt`` (+ ``.meta.json``).
    Nothing is written unless the whole run succeeds.
    """
    set_deterministic(deterministic)
    if len(cfg.manifests) != 1:
        raise ConfigError("run_experiment takes exactly one manifest; use run_cross for several")
    manifest = load_manifest(cfg.manifests[0])
    summary = _split_summary(manifest, cfg.policy)
    _check_splits(summary)
    mods = manifest.modality_set
    cfg = _model_config_for(cfg, mods)
    cfg_hash = cfg.config_hash()

    sr = cfg.feature.sample_rate
    train_set = load_instances(manifest, "train", sr, cfg.policy)
    val_set = load_instances(manifest, "val", sr, cfg.policy)

    model, history = train_cider(cfg, train_set, val_set, mods)
    val_results = {"CIdeR": EvalResult.from_scores(
        "CIdeR", predict_instances(model, val_set), [i.label for i in val_set],
        [i.instance_id for i in val_set], cfg.ci_level).to_dict()}

    bcfg = baseline_feature_config(cfg.feature)
    baselines = {}
    if cfg.baselines:
        X_train, y_train = feature_table(train_set, bcfg, cfg.policy)
        for kind in cfg.baselines:
            spec = BaselineSpec(kind, cfg.baseline_params.get(kind, {}))
            bm = train_baseline(spec, X_train, y_train, cfg.seed, bcfg)
            baselines[kind] = bm
            val_results[kind] = evaluate_baseline(bm, val_set, cfg.policy).to_dict()

    # model selection is complete; the test split is loaded only now
    test_set = load_instances(manifest, "test", sr, cfg.policy)
    test_ids = [inst.instance_id for inst in test_set]
    cider_scores = predict_instances(model, test_set)
    blind = not _labeled(test_set)

    results, significance = {}, []
    if test_set and not blind:
        y_test = [inst.label for inst in test_set]
        results["CIdeR"] = EvalResult.from_scores("CIdeR", cider_scores, y_test, test_ids, cfg.ci_level)
        for kind, bm in baselines.items():
            results[kind] = evaluate_baseline(bm, test_set, cfg.policy)
        for kind in baselines:
            significance.append(compare_models(results["CIdeR"], results[kind]).to_dict())

    report = {
        "schema": REPORT_SCHEMA,
        "name": cfg.name,
        "seed": cfg.seed,
        "config_hash": cfg_hash,
        "created_at": _timestamp(),
        "dataset": {"name": manifest.name, "modality_set": list(mods), "instances": summary},
        "blind_test": blind,
        "results": {k: v.to_dict() for k, v in results.items()},
        "validation": val_results,
        "significance": significance,
        "history": [h.to_dict() for h in history],
        "config": cfg.to_dict(),
    }

    stage = Staging(cfg.out_dir)
    try:
        ckpt_hash = save_checkpoint(model, stage.path("model.ckpt"),
                                    extra={"config_hash": cfg_hash, "seed": cfg.seed})
        report["checkpoint_hash"] = ckpt_hash
        for kind, bm in baselines.items():
            bm.save(stage.path(f"baseline_{kind}.pkl"), cfg_hash)
        pred_path = stage.path("predictions_test.txt")
        pred_path.write_text(format_predictions(test_ids, cider_scores), encoding="utf-8")
        write_sidecar(pred_path, cfg_hash, cfg.seed)
        stage.path("report.json").write_text(dumps_json(report), encoding="utf-8")
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    return report


def write_error_report(out_dir, exc: BaseException, cfg_hash: str | None = None, seed=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": getattr(exc, "exit_code", 1),
        "config_hash": cfg_hash,
        "seed": seed,
        "created_at": _timestamp(),
    }
    path = out / "error.json"
    write_atomic(path, dumps_json(payload))
    return path


# -- cross-dataset matrix ------------------------------------------------------------

class _CiderPredictor:
    def __init__(self, model: Model):
        self.model = model
        self.modality_set = model.modality_set

    def __call__(self, instances):
        return predict_instances(self.model, instances)


def run_cross(cfgs: Sequence[ExperimentConfig], include_pooled: bool = True,
              deterministic: bool = True, out_dir=None) -> dict:
    """Train one model per dataset (plus a pooled one) and score every test split."""
    if len(cfgs) < 2:
        raise ParameterError("a cross-dataset matrix needs at least two datasets")
    set_deterministic(deterministic)
    base = cfgs[0]
    data = []
    for cfg in cfgs:
        if len(cfg.manifests) != 1:
            raise ConfigError("each cross-dataset config names exactly one manifest")
        manifest = load_manifest(cfg.manifests[0])
        _check_splits(_split_summary(manifest, cfg.policy))
        sr = cfg.feature.sample_rate
        data.append((cfg, manifest,
                     load_instances(manifest, "train", sr, cfg.policy),
                     load_instances(manifest, "val", sr, cfg.policy)))

    names = [m.name for _, m, _, _ in data]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]

    predictors, histories = {}, {}
    for name, (cfg, manifest, tr, va) in zip(names, data):
        model, hist = train_cider(cfg, tr, va, manifest.modality_set)
        predictors[name] = _CiderPredictor(model)
        histories[name] = [h.to_dict() for h in hist]

    pooled_error = None
    if include_pooled:
        mod_sets = {m.modality_set for _, m, _, _ in data}
        if len(mod_sets) != 1:
            pooled_error = "datasets have different modality sets; pooled model skipped"
        else:
            tr = [i for _, _, t, _ in data for i in t]
            va = [i for _, _, _, v in data for i in v]
            model, hist = train_cider(base, tr, va, data[0][1].modality_set)
            predictors["All"] = _CiderPredictor(model)
            histories["All"] = [h.to_dict() for h in hist]

    # model selection done for every row; test splits are loaded only now
    tests = {}
    for name, (cfg, manifest, _, _) in zip(names, data):
        tests[name] = (load_instances(manifest, "test", cfg.feature.sample_rate, cfg.policy),
                       manifest.modality_set)
    matrix = cross_matrix(predictors, tests)
    if pooled_error:
        matrix.errors[("All", "*")] = pooled_error

    cfg_hash = hashlib.sha256("".join(c.config_hash() for c in cfgs).encode()).hexdigest()
    report = {
        "schema": CROSS_SCHEMA,
        "seed": base.seed,
        "config_hash": cfg_hash,
        "created_at": _timestamp(),
        "matrix": matrix.to_dict(),
        "history": histories,
        "configs": [c.to_dict() for c in cfgs],
    }
    out = Path(out_dir or base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "cross_report.json", dumps_json(report))
    return report


# -- prediction emission --------------------------------------------------------------

def emit_predictions(model_path, manifest_path, split: str, out_path, policy: str = "drop-incomplete") -> tuple[int, int]:
    """Write ``<id> <probability>`` lines sorted by id; returns ``(n_lines, n_errors)``.

    Instances whose audio cannot be read get an ``<id> ERROR <message>`` line.
    """
    model = load_checkpoint(model_path)
    manifest = load_manifest(manifest_path, check_audio=False)
    cfg = model.feature_config
    groups = group_instances(manifest, split, policy)
    ids = [g.instance_id for g in groups]
    if len(set(ids)) != len(ids):
        raise DataError("instance id collision in prediction output")

    lines, n_err = [], 0
    for g in sorted(groups, key=lambda g: g.instance_id):
        try:
            waves = tuple(None if e is None else load_audio(manifest.resolve(e), cfg.sample_rate)
                          for e in g.recordings)
            lines.append(f"{g.instance_id} {predict_recording(model, waves):.6f}")
        except CiderError as exc:
            n_err += 1
            msg = " ".join(str(exc).split())
            lines.append(f"{g.instance_id} ERROR {msg}")
    write_atomic(out_path, "".join(line + "\n" for line in lines))
    meta = read_checkpoint_meta(model_path)
    extra = meta.get("extra", {})
    write_sidecar(out_path, extra.get("config_hash", meta["hash"]), extra.get("seed"))
    return len(lines), n_err


def read_checkpoint_meta(path) -> dict:
    from .model import read_checkpoint

    meta, _ = read_checkpoint(path)
    return meta


def evaluate_checkpoint(model_path, manifest_path, split: str = "test", policy: str = "drop-incomplete",
                        level: float = 0.95) -> EvalResult:
    model = load_checkpoint(model_path)
    manifest = load_manifest(manifest_path)
    instances = load_instances(manifest, split, model.feature_config.sample_rate, policy)
    if not _labeled(instances):
        raise DataError(f"split {split!r} carries blind labels; use predict instead")
    scores = predict_instances(model, instances)
    return EvalResult.from_scores("CIdeR", scores, [i.label for i in instances],
                                  [i.instance_id for i in instances], level)


# -- verification -------------------------------------------------------------------

def verify_artifact(path) -> tuple[bool, str]:
    """Re-check the embedded hash of a report, checkpoint or prediction sidecar."""
    from .config import config_from_dict
    from .model import read_checkpoint

    path = Path(path)
    try:
        if path.suffix == ".ckpt":
            meta, _ = read_checkpoint(path)
            return True, f"checkpoint hash {meta['hash'][:12]} ok"
        if path.name.endswith(".meta.json"):
            meta = json.loads(path.read_text())
            target = path.with_name(meta["file"])
            ok = file_digest(target) == meta["sha256"]
            return ok, f"{target.name}: content digest {'ok' if ok else 'MISMATCH'}"
        report = json.loads(path.read_text())
        if report.get("schema") == REPORT_SCHEMA:
            ok = config_from_dict(report["config"]).config_hash() == report["config_hash"]
            return ok, f"report config hash {'ok' if ok else 'MISMATCH'}"
        if report.get("schema") == CROSS_SCHEMA:
            digest = hashlib.sha256(
                "".join(config_from_dict(c).config_hash() for c in report["configs"]).encode()).hexdigest()
            ok = digest == report["config_hash"]
            return ok, f"cross report config hash {'ok' if ok else 'MISMATCH'}"
        return False, "unrecognised artifact"
    except (CiderError, OSError, KeyError, json.JSONDecodeError) as exc:
        return False, str(exc)
