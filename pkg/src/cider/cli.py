"""Command-line entry point: ``cider <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 evaluation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiment as exp
from .config import ExperimentConfig, load_config
from .dataset import (
    MODALITIES,
    SynthSpec,
    convert_compare,
    convert_dicova,
    generate_synthetic_corpus,
    write_manifest,
)
from .dsp import FeatureConfig, chunk_recording, load_audio, mfcc, save_feature_matrix
from .errors import CiderError, ConfigError
from .evaluation import (
    CrossMatrix,
    EvalResult,
    SignificanceVerdict,
    equal_split_counts,
    render_matrix,
    render_results_table,
)

log = logging.getLogger("cider")


def _parse_counts(text: str) -> dict:
    """``train=60,60;val=20,20;test=20,20`` -> {"train": (60, 60), ...}."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        split, _, nums = part.partition("=")
        pos, neg = (int(v) for v in nums.split(","))
        out[split.strip()] = (pos, neg)
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (YAML)")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--out", type=Path, help="output directory (overrides config)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.epochs=5")


def _load_cfg(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    return load_config(args.config, args.overrides, seed=args.seed,
                       out_dir=str(args.out) if args.out else None)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(
        name=args.name,
        counts=_parse_counts(args.counts),
        modality_set=tuple(args.modalities.split(",")),
        sample_rate=args.sample_rate,
        duration_range=(args.min_duration, args.max_duration),
        separation=args.separation,
        signature_band=(args.band_low, args.band_high),
        blind_test=args.blind_test,
        negative_band=tuple(float(v) for v in args.negative_band.split(",")) if args.negative_band else None,
    )
    manifest = generate_synthetic_corpus(spec, args.seed if args.seed is not None else 0, args.out)
    print(f"wrote {len(manifest.entries)} recordings to {args.out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    try:
        report = exp.run_experiment(cfg, deterministic=args.deterministic)
    except CiderError as exc:
        exp.write_error_report(cfg.out_dir, exc, cfg.config_hash(), cfg.seed)
        raise
    print(_render_report(report))
    print(f"\nreport: {Path(cfg.out_dir) / 'report.json'}")
    return 0


def cmd_eval(args) -> int:
    result = exp.evaluate_checkpoint(args.model, args.manifest, args.split, args.policy)
    text = exp.dumps_json(result.to_dict())
    if args.out:
        exp.write_atomic(args.out, text)
    print(render_results_table([result]))
    return 0


def cmd_cross(args) -> int:
    base = _load_cfg(args)
    if len(base.manifests) < 2:
        raise ConfigError("cross needs a config listing at least two manifests")
    cfgs = [base.replace(manifests=(m,)) for m in base.manifests]
    report = exp.run_cross(cfgs, include_pooled=not args.no_pooled,
                           deterministic=args.deterministic, out_dir=base.out_dir)
    print(render_matrix(_matrix_from(report["matrix"])))
    return 0


def cmd_predict(args) -> int:
    n, n_err = exp.emit_predictions(args.model, args.manifest, args.split, args.out, args.policy)
    print(f"wrote {n} predictions to {args.out}" + (f" ({n_err} errors)" if n_err else ""))
    return 3 if n_err else 0


def _matrix_from(d: dict) -> CrossMatrix:
    return CrossMatrix(d["rows"], d["cols"], d["values"])


def _render_report(report: dict) -> str:
    if report.get("schema") == exp.CROSS_SCHEMA:
        return render_matrix(_matrix_from(report["matrix"]))
    results = [EvalResult.from_dict(v) for v in report.get("results", {}).values()]
    if not results:
        return "test split is blind: no metrics (see predictions_test.txt)"
    verdicts = [SignificanceVerdict(**v) for v in report.get("significance", [])]
    bold = ["CIdeR"] if verdicts and all(v.significant_at_95 for v in verdicts) else []
    lines = [render_results_table(results, bold=bold), ""]
    for v in verdicts:
        mark = "significant" if v.significant_at_95 else "not significant"
        lines.append(f"{v.model_a} vs {v.model_b}: z = {v.z:.3f} ({mark} at 95%)")
    return "\n".join(lines)


def cmd_report(args) -> int:
    if args.report is not None:
        report = json.loads(Path(args.report).read_text())
        print(_render_report(report))
        return 0
    if args.auc is None:
        raise ConfigError("report needs a report file or --auc")
    assumed = args.n_pos is None or args.n_neg is None
    if assumed:
        if args.n_total is None:
            raise ConfigError("give --n-pos/--n-neg or --n-total")
        n_pos, n_neg = equal_split_counts(args.n_total)
    else:
        n_pos, n_neg = args.n_pos, args.n_neg
    r = EvalResult.from_summary(args.name, args.auc, n_pos, n_neg, args.level, assumed_counts=assumed)
    print(render_results_table([r]))
    return 0


def cmd_convert(args) -> int:
    if args.layout == "compare":
        manifest = convert_compare(args.root, args.modality)
    else:
        manifest = convert_dicova(args.root, args.modality, args.fold)
    if args.out.parent.resolve() != manifest.root.resolve():
        # audio paths are relative to the layout root; make them absolute
        manifest = dataclasses.replace(manifest, entries=tuple(
            dataclasses.replace(e, audio_path=str(manifest.resolve(e).resolve())) for e in manifest.entries))
    write_manifest(manifest, args.out)
    print(f"wrote {len(manifest.entries)} entries to {args.out}")
    return 0


def cmd_features(args) -> int:
    cfg = load_config(args.config).feature if args.config else FeatureConfig()
    w = load_audio(args.audio, cfg.sample_rate)
    chunks = chunk_recording(w, cfg)
    values = mfcc(chunks[args.chunk], cfg)
    save_feature_matrix(args.out, values, cfg)
    print(f"wrote {values.shape[0]}x{values.shape[1]} feature matrix to {args.out}")
    return 0


def cmd_verify(args) -> int:
    ok_all = True
    for path in args.paths:
        ok, msg = exp.verify_artifact(path)
        ok_all &= ok
        print(f"{'OK ' if ok else 'BAD'} {path}: {msg}")
    return 0 if ok_all else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cider", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus and manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--counts", default="train=60,60;val=20,20;test=20,20",
                   help="per-split positive,negative participant counts")
    p.add_argument("--modalities", default="breath,vowel,counting",
                   help=f"comma-separated subset of {','.join(MODALITIES)}")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--min-duration", type=float, default=3.0)
    p.add_argument("--max-duration", type=float, default=9.0)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--band-low", type=float, default=1500.0)
    p.add_argument("--band-high", type=float, default=2500.0)
    p.add_argument("--negative-band", metavar="LOW,HIGH", help="band carrying the negatives' noise")
    p.add_argument("--blind-test", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train CIdeR and baselines, evaluate once on test")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--policy", default="drop-incomplete")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross", help="cross-dataset AUC matrix")
    _common(p)
    p.add_argument("--no-pooled", action="store_true", help="skip the pooled 'All' row")
    p.set_defaults(func=cmd_cross)

    p = sub.add_parser("predict", help="write per-instance probabilities (blind test submission)")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--policy", default="drop-incomplete")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="render a report, or an AUC with its Hanley-McNeil interval")
    p.add_argument("report", nargs="?", type=Path)
    p.add_argument("--auc", type=float)
    p.add_argument("--n-pos", type=int)
    p.add_argument("--n-neg", type=int)
    p.add_argument("--n-total", type=int, help="blind test size; assumes an equal class split")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert-manifest", help="build a manifest from a challenge folder layout")
    p.add_argument("--layout", choices=("compare", "dicova"), required=True)
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--modality", default="cough", choices=MODALITIES)
    p.add_argument("--fold", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("features", help="dump the MFCC matrix of one chunk of a WAV file")
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--chunk", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("verify", help="re-check hashes of reports, checkpoints and prediction sidecars")
    p.add_argument("paths", nargs="+", type=Path)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CiderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
