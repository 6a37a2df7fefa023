"""Command-line entry point: ``dysfusion <command> [options]``.

Commands
--------
features   extract log-mel feature caches for every manifest record
splits     build a split plan (SD, SID-1, SID-2, SEVERITY) as JSON
train      train one model per fold of a plan
eval       evaluate fold checkpoints and write the word-group report
verify     run a self-check suite (grad, dsp, bayes, splits, synth)
synth      write the synthetic verification corpus
gate       run the synthetic fusion gate
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import audio
from .config import ConfigFileError, RunConfig, load_config
from .harness import splits as splits_mod
from .harness.evaluate import EvalError, evaluate_plan
from .harness.manifest import ManifestError, load_manifest
from .model import SPEECH_ONLY, SPEECH_TEXT, CheckpointError, ModelConfig, build_model, load_checkpoint, \
    read_checkpoint, save_checkpoint
from .text import normalize_word, tokenize
from .training import Example, derive_seed, train_model

CACHE_SUFFIX = ".mel"


class CommandError(RuntimeError):
    pass


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# features


def _extract_one(job):
    record_id, wav_path, out_path, frontend = job
    try:
        result = audio.wav_to_features(wav_path, frontend)
    except (OSError, audio.WavFormatError, audio.FrontendError) as err:
        return record_id, "error", str(err)
    if result.excluded:
        return record_id, "excluded", f"{result.duration_s:.2f}s after trimming"
    audio.write_feature_cache(out_path, result.mel)
    return record_id, "ok", ""


def cmd_features(args) -> int:
    cfg = _config(args.config)
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).resolve().parent
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(r.record_id, base / r.audio_path, out / f"{r.record_id}{CACHE_SUFFIX}", cfg.frontend)
            for r in manifest]
    results = _map(_extract_one, jobs, args.jobs)
    errors = [(rid, msg) for rid, status, msg in results if status == "error"]
    excluded = [(rid, msg) for rid, status, msg in results if status == "excluded"]
    cached = sum(status == "ok" for _, status, _ in results)
    _write_json(out / "features.json", {
        "config_digest": cfg.digest(), "manifest": str(Path(args.manifest).resolve()),
        "manifest_digest": manifest.digest(), "cached": cached,
        "excluded": {rid: msg for rid, msg in excluded}, "errors": {rid: msg for rid, msg in errors}})
    for rid, msg in excluded:
        print(f"excluded {rid}: {msg} exceeds {cfg.frontend.max_duration_s:g}s")
    for rid, msg in errors:
        print(f"error {rid}: {msg}", file=sys.stderr)
    print(f"{cached} cached, {len(excluded)} excluded, {len(errors)} errors")
    return 1 if errors else 0


# ---------------------------------------------------------------------------
# splits


def cmd_splits(args) -> int:
    manifest = load_manifest(args.manifest)
    task = args.task or ("severity" if args.plan == splits_mod.SEVERITY_PLAN else "detection")
    plan = splits_mod.build_plan(manifest, args.plan, args.seed, task, args.word_mode)
    problems = splits_mod.check_plan(plan, manifest)
    if problems:
        raise CommandError("plan violates its invariants: " + "; ".join(problems))
    plan.meta["manifest"] = str(Path(args.manifest).resolve())
    plan.meta["manifest_digest"] = manifest.digest()
    plan.save(args.out)
    sizes = ", ".join(f"{f.fold_id}:{len(f.train)}/{len(f.test)}" for f in plan.folds[:4])
    more = " ..." if len(plan.folds) > 4 else ""
    print(f"{plan.name}: {len(plan.folds)} folds (train/test {sizes}{more}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _examples(manifest, record_ids, features: Path, task: str) -> tuple[list[Example], list[str]]:
    examples, missing = [], []
    for rid in record_ids:
        path = features / f"{rid}{CACHE_SUFFIX}"
        if not path.exists():
            missing.append(rid)
            continue
        r = manifest.records[manifest.by_id[rid]]
        examples.append(Example(rid, audio.read_feature_cache(path).astype("f8"),
                                tokenize(normalize_word(r.word_text)), r.label(task), r.speaker_id))
    return examples, missing


def run_digest(cfg: RunConfig, modality: str, plan_digest: str) -> str:
    blob = json.dumps({"config": cfg.digest(), "modality": modality, "plan": plan_digest}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _train_fold(job) -> dict:
    fold, manifest_path, features, cfg, modality, out, digest, plan_name = job
    manifest = load_manifest(manifest_path)
    train, missing = _examples(manifest, fold.train, Path(features), cfg.task)
    model = build_model(cfg.model, modality, derive_seed(cfg.seed, "init", fold.fold_id))
    result = train_model(model, train, None, cfg.train_config(fold.fold_id))
    out = Path(out)
    (out / f"fold_{fold.fold_id}.csv").write_text(result.log.to_csv())
    meta = {"run_digest": digest, "config_digest": cfg.digest(), "seed": cfg.seed, "fold": fold.fold_id,
            "plan": plan_name, "task": cfg.task, "modality": modality, "model_config": cfg.model.to_dict(),
            "best_epoch": result.log.best_epoch}
    save_checkpoint(out / f"fold_{fold.fold_id}.ckpt", model, meta)
    return {"fold": fold.fold_id, "epochs": len(result.log.epochs), "best_epoch": result.log.best_epoch,
            "stopped_early": result.log.stopped_early, "train_records": len(train),
            "missing_features": len(missing)}


def cmd_train(args) -> int:
    plan = splits_mod.SplitPlan.load(args.plan_file)
    overrides = {"task": plan.task, "plan": plan.name}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = _config(args.config).with_overrides(overrides)
    manifest_path = args.manifest or plan.meta.get("manifest")
    if not manifest_path:
        raise CommandError("plan file records no manifest; pass --manifest")
    features = Path(args.features)
    if not features.is_dir():
        raise CommandError(f"feature directory {features} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = run_digest(cfg, args.modality, _sha256_file(args.plan_file))
    folds = [f for f in plan.folds if not args.folds or f.fold_id in args.folds]
    jobs = [(f, manifest_path, str(features), cfg, args.modality, str(out), digest, plan.name) for f in folds]
    summaries = _map(_train_fold, jobs, args.jobs)
    _write_json(out / "run.json", {
        "run_digest": digest, "config_digest": cfg.digest(), "seed": cfg.seed, "modality": args.modality,
        "plan": plan.name, "task": cfg.task, "plan_file": str(Path(args.plan_file).resolve()),
        "manifest": str(Path(manifest_path).resolve()), "features": str(features.resolve()),
        "folds": summaries})
    for s in summaries:
        print(f"fold {s['fold']}: {s['epochs']} epochs, best epoch {s['best_epoch']}, "
              f"{s['train_records']} training records")
    print(f"trained {len(summaries)} fold(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    plan = splits_mod.SplitPlan.load(args.plan_file)
    ckdir = Path(args.checkpoints)
    run_info = {}
    if (ckdir / "run.json").exists():
        run_info = json.loads((ckdir / "run.json").read_text())
    manifest_path = args.manifest or run_info.get("manifest") or plan.meta.get("manifest")
    features = args.features or run_info.get("features")
    if not manifest_path or not features:
        raise CommandError("cannot locate manifest/features; pass --manifest and --features")
    manifest = load_manifest(manifest_path)

    models, digests = {}, {}
    for fold in plan.folds:
        path = ckdir / f"fold_{fold.fold_id}.ckpt"
        if not path.exists():
            raise CommandError(f"missing checkpoint for fold {fold.fold_id}: {path}")
        ckpt = read_checkpoint(path)
        digests[fold.fold_id] = ckpt.meta.get("run_digest")
        model = build_model(ModelConfig.from_dict(ckpt.meta["model_config"]), ckpt.meta["modality"])
        load_checkpoint(path, model)
        models[fold.fold_id] = model
    distinct = sorted({d for d in digests.values()}, key=str)
    if len(distinct) != 1:
        detail = ", ".join(f"{f}={str(d)[:12]}" for f, d in sorted(digests.items()))
        raise CommandError(f"checkpoints come from different runs (mixed config digests: {detail})")
    first = read_checkpoint(ckdir / f"fold_{plan.folds[0].fold_id}.ckpt").meta

    def load_examples(ids):
        examples, _ = _examples(manifest, ids, Path(features), plan.task)
        return examples

    meta = {"run_digest": distinct[0], "config_digest": first.get("config_digest"), "seed": first.get("seed"),
            "modality": first.get("modality")}
    report = evaluate_plan(models, plan, manifest, load_examples, meta=meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"{'column':<14}{'accuracy %':>12}{'n':>8}")
    for line in report.to_csv().splitlines()[1:]:
        col, acc, _, total = line.rsplit(",", 3)
        print(f"{col:<14}{acc or '-':>12}{total:>8}")
    return 0


# ---------------------------------------------------------------------------
# verify / synth / gate


def cmd_verify(args) -> int:
    from .verify import SUITES

    suite = SUITES[args.suite]
    kwargs = {"n_seeds": args.seeds} if args.suite == "grad" and args.seeds else {}
    result = suite(**kwargs)
    for line in result.details:
        print(f"  {line}")
    print(result.summary())
    return 0 if result.passed else 1


def cmd_synth(args) -> int:
    from .harness.synthetic import SyntheticConfig, generate_synthetic_corpus

    cfg = SyntheticConfig(task=args.task, n_words=args.words, n_speakers=args.speakers,
                          utterances_per_pair=args.reps)
    manifest = generate_synthetic_corpus(cfg, args.seed, args.out)
    print(f"{len(manifest)} utterances, {len(manifest.speakers)} speakers -> {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_gate(args) -> int:
    import tempfile

    from .harness.gate import corpus_examples, run_gate

    modalities = [SPEECH_ONLY, SPEECH_TEXT] if args.modality == "both" else [args.modality]
    ok = True
    for seed in args.seeds:
        with tempfile.TemporaryDirectory() as tmp:
            examples = corpus_examples(args.task, seed, tmp)
        for modality in modalities:
            result = run_gate(args.task, modality, seed, examples)
            print(result.summary(), flush=True)
            ok &= result.passed
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dysfusion", description="Speech + text dysarthria assessment toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract log-mel feature caches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("splits", help="build a split plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True, choices=splits_mod.PLANS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("detection", "severity"))
    p.add_argument("--word-mode", choices=("random", "block"), default="random")
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="train one model per fold")
    p.add_argument("--plan-file", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--config")
    p.add_argument("--modality", choices=(SPEECH_ONLY, SPEECH_TEXT), default=SPEECH_TEXT)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", nargs="*", help="train only these fold ids")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints")
    p.add_argument("--plan-file", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a self-check suite")
    p.add_argument("--suite", required=True, choices=("grad", "dsp", "bayes", "splits", "synth"))
    p.add_argument("--seeds", type=int, help="number of random seeds for the grad suite")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("detection-xor", "severity-mod4"), default="detection-xor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--words", type=int, default=20)
    p.add_argument("--speakers", type=int, default=16)
    p.add_argument("--reps", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gate", help="run the synthetic fusion gate")
    p.add_argument("--task", choices=("detection-xor", "severity-mod4"), default="detection-xor")
    p.add_argument("--modality", choices=(SPEECH_ONLY, SPEECH_TEXT, "both"), default="both")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_gate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigFileError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (CommandError, ManifestError, EvalError, CheckpointError, splits_mod.SplitError,
            audio.WavFormatError, audio.FrontendError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
