"""Command-line entry point.

Commands: gen-data, train, eval, sweep, ablate, pipeline, report. Every
command is deterministic given its config file and seed; outputs live
under one run directory with a MANIFEST of file digests.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, RunConfig, load_run_config, resolved_config_dict
from .data import Corpus, build_corpus, load_corpus, save_corpus
from .evaluate import (
    LanguageGroups,
    ablate,
    evaluate_model,
    figure_rows,
    relative_improvement,
    sweep,
    write_reports_csv,
)
from .model import AvsrModel, load_checkpoint, model_from_checkpoint
from .noise import NoiseBank, NoiseSpec
from .train import TrainingDiverged, train_stage1, train_stage2

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage errors, not argparse's 2
        raise _UsageError(message)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_config(args) -> RunConfig:
    if not args.config:
        raise _UsageError("--config is required")
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        raw = json.loads(Path(args.config).read_text())
        raw["seed"] = args.seed
        for section in ("corpus", "stage1", "stage2", "eval"):
            raw.get(section, {}).pop("seed", None)
        raw.pop("noise_seed", None)
        raw.pop("eval_seed", None)
        cfg = load_run_config(raw)
    return cfg


def _out_dir(args) -> Path:
    if not args.out:
        raise _UsageError("--out is required")
    return Path(args.out)


def _groups(cfg: RunConfig) -> LanguageGroups:
    return LanguageGroups(
        non_primary=tuple(range(1, cfg.corpus.n_languages)),
        high_resource=tuple(cfg.eval.high_resource),
        low_resource=tuple(cfg.eval.low_resource))


def _corpus_dir(args, out: Path) -> Path:
    return Path(args.corpus) if getattr(args, "corpus", None) else out / "corpus"


def _load_corpus_checked(cfg: RunConfig, corpus_dir: Path) -> Corpus:
    if not (corpus_dir / "manifest.json").exists():
        raise FileNotFoundError(
            f"no corpus at {corpus_dir}; run gen-data first (or pass --corpus)")
    corpus = load_corpus(corpus_dir)
    if corpus.manifest["config"] != asdict(cfg.corpus):
        raise ConfigError(f"corpus at {corpus_dir} was generated from a different "
                          "corpus config than this run config")
    return corpus


def _bank(cfg: RunConfig, corpus: Corpus) -> NoiseBank:
    return NoiseBank.from_utterances(corpus.splits["train"], cfg.noise.bank_size,
                                     seed=cfg.noise_seed)


def _print_language_counts(corpus: Corpus) -> None:
    for spec in corpus.languages:
        print(f"language {spec.lang_id}: train={spec.train_count} "
              f"dev={corpus.config.dev_count} test={corpus.config.test_count}")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus_dir = _corpus_dir(args, out)
    corpus = build_corpus(cfg.corpus)
    save_corpus(corpus, corpus_dir, force=args.force)
    _write_json(out / "config.resolved.json", resolved_config_dict(cfg))
    _print_language_counts(corpus)
    print(f"corpus written to {corpus_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus_checked(cfg, _corpus_dir(args, out))
    bank = _bank(cfg, corpus)
    _write_json(out / "config.resolved.json", resolved_config_dict(cfg))
    if args.stage == 1:
        model = AvsrModel(cfg.model, gated=False, init_seed=cfg.seed)
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            model.set_parameter_values(ckpt.values, strict=True)
        path, state = train_stage1(model, corpus, bank, cfg.stage1, out / "stage1")
    else:
        stage1_ckpt = Path(args.stage1_ckpt) if args.stage1_ckpt \
            else out / "stage1" / "stage1.avckpt"
        if args.resume:
            raise _UsageError("--resume is only supported for --stage 1; "
                              "stage 2 always starts from the stage-1 checkpoint")
        path, state = train_stage2(stage1_ckpt, corpus, bank, cfg.stage2,
                                   out / "stage2")
    print(f"stage {args.stage}: best dev accuracy {state.best_accuracy:.4f} "
          f"at step {state.best_step}")
    print(f"checkpoint: {path}")
    return 0


def _load_model(path) -> AvsrModel:
    return model_from_checkpoint(load_checkpoint(path))


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus_checked(cfg, _corpus_dir(args, out))
    bank = _bank(cfg, corpus)
    model = _load_model(args.ckpt)
    category = args.noise if args.noise else cfg.eval.noise_category
    snr = args.snr if args.snr is not None else cfg.eval.snr_db
    spec = None if category == "clean" else NoiseSpec(category, snr)
    report = evaluate_model(model, corpus.splits["test"], bank, spec, args.mode,
                            corpus, _groups(cfg), eval_seed=cfg.eval_seed,
                            condition={"model": Path(args.ckpt).stem})
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{Path(args.ckpt).stem}_{args.mode}_{category}_{snr}"
    write_reports_csv([report], corpus, eval_dir / f"eval_{tag}.csv")
    print(f"avg WER: non-primary {report.avg_non_primary:.4f} "
          f"high-resource {report.avg_high_resource:.4f} "
          f"low-resource {report.avg_low_resource:.4f}")
    return 0


def _run_sweep(cfg: RunConfig, corpus: Corpus, bank: NoiseBank, model_a: AvsrModel,
               model_av: AvsrModel, out: Path, jobs: int) -> list:
    if jobs > 1:
        reports = _parallel_sweep(cfg, corpus, bank, model_a, model_av, jobs)
    else:
        reports = sweep(model_a, model_av, corpus.splits["test"], bank, corpus,
                        _groups(cfg), categories=cfg.sweep.categories,
                        snrs=cfg.sweep.snrs, eval_seed=cfg.eval_seed)
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, corpus, eval_dir / "sweep.csv")
    rows = figure_rows(reports)
    with open(eval_dir / "figure_noise_types.csv", "w") as f:
        f.write("model,category,mean_wer_non_primary\n")
        for row in rows:
            f.write(f"{row['model']},{row['category']},"
                    f"{row['mean_wer_non_primary']:.6f}\n")
    return reports


def _sweep_cell(payload):
    model, utts, bank, spec, mode, corpus, groups, eval_seed, condition = payload
    try:
        return evaluate_model(model, utts, bank, spec, mode, corpus, groups,
                              eval_seed=eval_seed, condition=condition)
    except Exception as exc:
        condition = dict(condition)
        condition["failed"] = str(exc)
        return condition


def _parallel_sweep(cfg, corpus, bank, model_a, model_av, jobs):
    from concurrent.futures import ProcessPoolExecutor

    tasks = []
    for tag, model, mode in (("audio_only", model_a, "a"),
                             ("audio_visual", model_av, "av")):
        for category in cfg.sweep.categories:
            for snr in cfg.sweep.snrs:
                condition = {"model": tag, "mode": mode,
                             "category": category, "snr_db": snr}
                tasks.append((model, corpus.splits["test"], bank,
                              NoiseSpec(category, snr), mode, corpus,
                              _groups(cfg), cfg.eval_seed, condition))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_cell, tasks))


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus_checked(cfg, _corpus_dir(args, out))
    bank = _bank(cfg, corpus)
    reports = _run_sweep(cfg, corpus, bank, _load_model(args.ckpt_a),
                         _load_model(args.ckpt_av), out, args.jobs)
    failed = sum(1 for r in reports if isinstance(r, dict))
    print(f"sweep complete: {len(reports) - failed} cells ok, {failed} failed")
    print(f"results: {out / 'eval' / 'sweep.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus_checked(cfg, _corpus_dir(args, out))
    bank = _bank(cfg, corpus)
    policies = cfg.ablate.policies
    if args.policies:
        policies = json.loads(Path(args.policies).read_text())
    stage1_ckpt = Path(args.ckpt_a) if args.ckpt_a else out / "stage1" / "stage1.avckpt"
    condition = NoiseSpec(cfg.eval.noise_category, cfg.eval.snr_db) \
        if cfg.eval.noise_category != "clean" else None
    rows = ablate(stage1_ckpt, policies, corpus, bank, cfg.stage2, _groups(cfg),
                  eval_condition=condition, out_dir=out / "ablate",
                  eval_seed=cfg.eval_seed)
    table_path = out / "ablate" / "ablation.csv"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    with open(table_path, "w") as f:
        f.write("p_av,p_a,p_v,avg_non_primary_wer,dev_accuracy\n")
        for row in rows:
            p = row["policy"]
            f.write(f"{p[0]},{p[1]},{p[2]},{row['avg_non_primary_wer']:.6f},"
                    f"{row['dev_accuracy']:.6f}\n")
    print("policy ranking (best first):")
    for row in rows:
        print(f"  p_av={row['policy'][0]} p_a={row['policy'][1]} "
              f"p_v={row['policy'][2]}: WER {row['avg_non_primary_wer']:.4f}")
    return 0


def _manifest(out: Path) -> dict:
    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "MANIFEST.json":
            files[str(path.relative_to(out))] = _sha256_file(path)
    return files


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", resolved_config_dict(cfg))

    corpus_dir = out / "corpus"
    if (corpus_dir / "manifest.json").exists() and not args.force:
        corpus = _load_corpus_checked(cfg, corpus_dir)
        print("reusing existing corpus")
    else:
        corpus = build_corpus(cfg.corpus)
        save_corpus(corpus, corpus_dir, force=True)
        print("corpus generated")
    bank = _bank(cfg, corpus)

    model = AvsrModel(cfg.model, gated=False, init_seed=cfg.seed)
    s1_path, s1_state = train_stage1(model, corpus, bank, cfg.stage1, out / "stage1")
    print(f"stage 1 done: best dev accuracy {s1_state.best_accuracy:.4f}")
    metrics = {"stage1_dev_accuracy": s1_state.best_accuracy,
               "stage1_best_step": s1_state.best_step}

    groups = _groups(cfg)
    eval_spec = None if cfg.eval.noise_category == "clean" \
        else NoiseSpec(cfg.eval.noise_category, cfg.eval.snr_db)
    model_a = _load_model(s1_path)
    report_a = evaluate_model(model_a, corpus.splits["test"], bank, eval_spec, "a",
                              corpus, groups, eval_seed=cfg.eval_seed,
                              condition={"model": "audio_only"})
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_reports_csv([report_a], corpus, eval_dir / "eval_audio_only.csv")
    metrics["wer_audio_only_non_primary"] = report_a.avg_non_primary

    if not args.skip_stage2:
        s2_path, s2_state = train_stage2(s1_path, corpus, bank, cfg.stage2,
                                         out / "stage2")
        print(f"stage 2 done: best dev accuracy {s2_state.best_accuracy:.4f}")
        metrics["stage2_dev_accuracy"] = s2_state.best_accuracy
        metrics["stage2_best_step"] = s2_state.best_step
        model_av = _load_model(s2_path)
        report_av = evaluate_model(model_av, corpus.splits["test"], bank, eval_spec,
                                   "av", corpus, groups, eval_seed=cfg.eval_seed,
                                   condition={"model": "audio_visual"})
        write_reports_csv([report_av], corpus, eval_dir / "eval_audio_visual.csv")
        metrics["wer_audio_visual_non_primary"] = report_av.avg_non_primary
        metrics["relative_improvement_non_primary"] = relative_improvement(
            report_a.avg_non_primary, report_av.avg_non_primary)
        _run_sweep(cfg, corpus, bank, model_a, model_av, out, args.jobs)
        print("sweep done")

    summary = {"metrics": metrics, "artifacts": _manifest(out)}
    _write_json(out / "run_summary.json", summary)
    _write_json(out / "MANIFEST.json", _manifest(out))
    digest = hashlib.sha256(
        json.dumps(summary, sort_keys=True).encode()).hexdigest()
    print(f"run summary digest: {digest}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    sweep_csv = run_dir / "eval" / "sweep.csv"
    figure_csv = run_dir / "eval" / "figure_noise_types.csv"
    missing = [str(p) for p in (sweep_csv, figure_csv) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing sweep outputs: {missing}; run sweep "
                                "or pipeline first")
    import csv as _csv
    by_model_category: dict[tuple[str, str], float] = {}
    with open(figure_csv) as f:
        for row in _csv.DictReader(f):
            by_model_category[(row["model"], row["category"])] = \
                float(row["mean_wer_non_primary"])
    categories = sorted({c for _, c in by_model_category})
    lines = ["mean WER (non-primary languages) over SNR levels, by noise type",
             f"{'category':>16} {'audio_only':>12} {'audio_visual':>13} "
             f"{'rel_improv_%':>13}"]
    for category in categories:
        a = by_model_category.get(("audio_only", category))
        av = by_model_category.get(("audio_visual", category))
        if a is None or av is None:
            continue
        lines.append(f"{category:>16} {a:>12.4f} {av:>13.4f} "
                     f"{relative_improvement(a, av):>13.2f}")
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="avfusion",
                     description="gated audio-visual recognizer pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the root seed")
        if needs_out:
            p.add_argument("--out", help="run directory for outputs")
        p.add_argument("--corpus", help="corpus directory (default: OUT/corpus)")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel evaluation workers")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", help="checkpoint to initialize stage-1 weights from")
    p.add_argument("--stage1-ckpt", help="stage-1 checkpoint for --stage 2 "
                                         "(default: OUT/stage1/stage1.avckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one checkpoint under one condition")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("av", "a", "v"), required=True)
    p.add_argument("--noise", help="noise category or 'clean'")
    p.add_argument("--snr", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="noise-type x SNR evaluation grid")
    common(p)
    p.add_argument("--ckpt-a", required=True, help="audio-only checkpoint")
    p.add_argument("--ckpt-av", required=True, help="audio-visual checkpoint")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="dropout-policy ablation")
    common(p)
    p.add_argument("--ckpt-a", help="stage-1 checkpoint "
                                    "(default: OUT/stage1/stage1.avckpt)")
    p.add_argument("--policies", help="JSON file with a list of [p_av,p_a,p_v]")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", help="corpus -> stage 1 -> stage 2 -> eval grid")
    common(p)
    p.add_argument("--skip-stage2", action="store_true",
                   help="stop after the audio-only baseline")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--run", required=True, help="run directory with eval outputs")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileExistsError as exc:
        print(f"refusing to overwrite: {exc} (pass --force)", file=sys.stderr)
        return 1
    except (TrainingDiverged, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
