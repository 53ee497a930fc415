"""Command-line entry points.

Subcommands: synth (generate a cohort directory), run (train and evaluate
one variant/model cell), explain (per-image ROI explanations for a finished
run), select-rois (ROI-count selection curve), report (summarize a run).

Exit codes: 0 success, 2 configuration or input error, 3 lock-box protocol
violation, 4 numeric abort during optimization.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import core, evalharness, explain, learn, pipeline, synthcohort
from .evalharness import LockBoxError
from .learn import NumericAbort
from .pipeline import ConfigError, RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LOCKBOX = 3
EXIT_NUMERIC = 4


def parse_seeds(text: str) -> tuple[int, ...]:
    """"1-20" or "1,3,9" or a mix ("1-5,8")."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError(f"no seeds in {text!r}")
    return tuple(out)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def _ensure_out_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(
            f"output directory {path} is not empty; pass --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _default_run_dir() -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    return Path("runs") / f"run-{stamp}"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    doc = _load_config_file(args.config)
    cohort_kw = dict(doc.get("cohort", {}))
    if args.seed is not None:
        cohort_kw["seed"] = args.seed
    if args.subjects is not None:
        cohort_kw["n_subjects"] = args.subjects
    if args.dims is not None:
        cohort_kw["dims"] = [args.dims] * 3
    config = synthcohort.SynthConfig.from_json_dict(cohort_kw) if cohort_kw \
        else synthcohort.SynthConfig()
    truth = synthcohort.TruthModel.from_json_dict(doc["truth"]) \
        if "truth" in doc else synthcohort.default_truth()

    out = _ensure_out_dir(Path(args.out), args.force)
    manifest = synthcohort.write_cohort(config, truth, out)

    records = manifest.subjects
    n = len(records)
    aphasic = sum(core.outcome_label(r.score) for r in records)
    print(f"cohort written to {out} ({n} subjects, dims "
          f"{'x'.join(str(d) for d in config.dims)})")
    print(f"aphasic fraction: {aphasic / n:.3f} ({aphasic}/{n})")
    counts = {c: 0 for c in core.SEVERITY_CATEGORIES}
    for r in records:
        counts[r.severity] += 1
    print("severity distribution: "
          + ", ".join(f"{c}={counts[c]}" for c in core.SEVERITY_CATEGORIES))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _run_config(args, doc: dict) -> RunConfig:
    kw = dict(doc.get("run", {}))
    config = RunConfig.from_json_dict(kw) if kw else RunConfig()
    overrides = {}
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.model is not None:
        overrides["model"] = args.model
    if args.seeds is not None:
        overrides["seeds"] = parse_seeds(args.seeds)
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        config = replace(config, **overrides)
    if getattr(args, "preset", None) == "paper":
        config = pipeline.paper_preset(config)
    return config


def _update_index(out: Path, extra: dict) -> None:
    index_path = out / "index.json"
    doc = json.loads(index_path.read_text()) if index_path.exists() else {}
    doc.setdefault("files", {}).update(extra)
    index_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    doc = _load_config_file(args.config)
    config = _run_config(args, doc)
    cohort = pipeline.CohortData.from_directory(args.cohort)
    out = _ensure_out_dir(Path(args.out) if args.out else _default_run_dir(),
                          args.force)

    result = pipeline.run_experiment(cohort, config,
                                     audit_path=out / "audit.jsonl")
    pipeline.emit_run(result, out)
    _update_index(out, {"audit": "audit.jsonl"})

    if args.roi_sweep:
        if config.model != "lightweight":
            raise ConfigError("--roi-sweep needs the lightweight image model")
        exp = doc.get("explain", {})
        ranking = pipeline.roi_ranking_for(
            result, config.seeds[0],
            n_explain=exp.get("n_explain", 12),
            n_perturb=exp.get("n_perturb", 160),
            explain_seed=exp.get("seed", 0))
        counts = tuple(doc.get("roi_counts", range(3, 11)))
        curve = pipeline.roi_count_sweep(cohort, config, ranking,
                                         counts=counts,
                                         plan=result.plan)
        pipeline.write_ranking_csv(ranking, out / "roi_ranking.csv",
                                   cohort.labels_for(config.variant).label_names)
        pipeline.write_curve_csv(curve, out / "roi_curve.csv")
        pipeline.write_curve_svg(curve, out / "roi_curve.svg")
        _update_index(out, {"roi_ranking": "roi_ranking.csv",
                            "roi_curve": "roi_curve.csv",
                            "roi_curve_svg": "roi_curve.svg"})
        print(f"roi sweep: best k = {curve.best_k}")

    bal = result.aggregate["balanced_accuracy"]
    auc_v = result.aggregate["auc"]
    print(f"run complete: {config.variant} / {config.model}, "
          f"{len(config.seeds)} seed(s), lr {result.best_lr:g}")
    print(f"balanced accuracy {bal[0]:.3f} +/- {bal[1]:.3f}, "
          f"auc {auc_v[0]:.3f} +/- {auc_v[1]:.3f}")
    scan = evalharness.audit_scan(out / "audit.jsonl")
    print(f"audit: {scan['n_entries']} entries, {scan['n_unlocks']} unlock(s), "
          f"{scan['pre_unlock_lockbox_accesses']} pre-unlock held-out "
          f"access(es)")
    print(f"reports in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared run-directory plumbing for explain / select-rois


def _load_run(run_dir: Path) -> tuple[RunConfig, dict]:
    index_path = run_dir / "index.json"
    if not index_path.exists():
        raise ConfigError(f"{run_dir} has no index.json (not a run directory)")
    doc = json.loads(index_path.read_text())
    return RunConfig.from_json_dict(doc["config"]), doc


def _load_checkpoint(run_dir: Path, config: RunConfig,
                     seed: int | None) -> tuple[int, learn.ModelParams]:
    seed = config.seeds[0] if seed is None else seed
    path = run_dir / "checkpoints" / f"seed-{seed:03d}.ckp"
    if not path.exists():
        raise ConfigError(f"no checkpoint for seed {seed} under {run_dir}")
    params = learn.read_checkpoint(path)
    if params.kind != config.model:
        raise ConfigError(f"checkpoint is a {params.kind!r} model but the run "
                          f"config says {config.model!r}")
    if params.cnn is not None and params.cnn.input_hw != (config.image_size,
                                                          config.image_size):
        raise ConfigError(
            f"checkpoint expects {params.cnn.input_hw} inputs but the variant "
            f"renders {config.image_size}x{config.image_size}")
    return seed, params


def _rebuild_variant(cohort: pipeline.CohortData, config: RunConfig,
                     ) -> tuple[pipeline.VariantData, evalharness.SplitPlan]:
    plan = evalharness.stratified_partition(cohort.records, k=5,
                                            seed=config.partition_seed)
    train_ids = {i for i, g in plan.assignment.items()
                 if g in pipeline.TRAIN_GROUPS}
    from .glyphs import normalizers_from_records
    size_ref, time_ref = normalizers_from_records(
        [r for r in cohort.records if r.id in train_ids])
    return pipeline.build_variant(cohort, config, size_ref, time_ref), plan


def cmd_explain(args) -> int:
    run_dir = Path(args.run)
    config, _doc = _load_run(run_dir)
    if args.variant is not None and args.variant != config.variant:
        raise ConfigError(
            f"checkpoint was trained on variant {config.variant!r}, "
            f"not {args.variant!r}")
    if config.model != "lightweight":
        raise ConfigError("explanations support the image-only model; "
                          f"this run used {config.model!r}")
    cohort = pipeline.CohortData.from_directory(args.cohort)
    seed, params = _load_checkpoint(run_dir, config, args.seed)
    data, plan = _rebuild_variant(cohort, config)

    groups = set(pipeline.TRAIN_GROUPS) | {pipeline.VAL_GROUP}
    pool = {i: img for i, img in data.images.items()
            if plan.assignment[i] in groups}
    out = _ensure_out_dir(Path(args.out), args.force)
    explanations, ranking = explain.explain_pool(
        pipeline.image_classifier(params), pool, data.label_image,
        n_explain=args.n_explain, n_perturb=args.n_perturb,
        seed=args.explain_seed, with_counterfactuals=True)

    names = cohort.labels_for(config.variant).label_names
    expl_dir = out / "explanations"
    expl_dir.mkdir(exist_ok=True)
    for expl_obj in explanations:
        (expl_dir / f"{expl_obj.image_id}.json").write_text(
            json.dumps(explain.explanation_json(expl_obj), indent=2,
                       sort_keys=True) + "\n")
        (expl_dir / f"{expl_obj.image_id}.txt").write_text(
            explain.explanation_report(expl_obj, roi_names=names) + "\n")
    pipeline.write_ranking_csv(ranking, out / "roi_ranking.csv", names)

    print(f"explained {len(explanations)} image(s) from run seed {seed}")
    top = ranking.rois[:5]
    print("top ROIs: " + ", ".join(names.get(r, str(r)) for r in top))
    print(f"reports in {out}")
    return EXIT_OK


def cmd_select_rois(args) -> int:
    run_dir = Path(args.run)
    config, _doc = _load_run(run_dir)
    if config.model != "lightweight":
        raise ConfigError("ROI selection needs the lightweight image model")
    cohort = pipeline.CohortData.from_directory(args.cohort)
    seed, params = _load_checkpoint(run_dir, config, args.seed)
    data, plan = _rebuild_variant(cohort, config)

    groups = set(pipeline.TRAIN_GROUPS) | {pipeline.VAL_GROUP}
    pool = {i: img for i, img in data.images.items()
            if plan.assignment[i] in groups}
    _, ranking = explain.explain_pool(
        pipeline.image_classifier(params), pool, data.label_image,
        n_explain=args.n_explain, n_perturb=args.n_perturb,
        seed=args.explain_seed)

    counts = parse_seeds(args.counts)  # same "3-10" syntax
    curve = pipeline.roi_count_sweep(cohort, config, ranking, counts=counts,
                                     sweep_epochs=args.sweep_epochs, plan=plan)
    out = _ensure_out_dir(Path(args.out), args.force)
    names = cohort.labels_for(config.variant).label_names
    pipeline.write_ranking_csv(ranking, out / "roi_ranking.csv", names)
    pipeline.write_curve_csv(curve, out / "roi_curve.csv")
    pipeline.write_curve_svg(curve, out / "roi_curve.svg")
    chosen = ranking.rois[:curve.best_k]
    (out / "selection.json").write_text(json.dumps(
        {"best_k": curve.best_k,
         "rois": [{"label": int(r), "name": names.get(r, str(r))}
                  for r in chosen]},
        indent=2, sort_keys=True) + "\n")
    print(f"best k = {curve.best_k}: "
          + ", ".join(names.get(r, str(r)) for r in chosen))
    print(f"reports in {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    config, doc = _load_run(run_dir)
    print(f"run: {config.variant} / {config.model}, "
          f"{len(config.seeds)} seed(s), best lr {doc.get('best_lr')}")
    balance = doc.get("balance", {})
    if balance:
        worst = max(balance.get("max_smd", {"": 0.0}).values())
        print(f"partition: worst covariate SMD {worst:.4f}, "
              f"objective {balance.get('objective', 0.0):.4f}")
    summary = run_dir / "summary.csv"
    if summary.exists():
        for line in summary.read_text().splitlines()[1:]:
            variant, model, metric, mean, se = line.split(",")
            print(f"  {metric:>18s}: {float(mean):.3f} +/- {float(se):.3f}")
    audit = run_dir / "audit.jsonl"
    if audit.exists():
        scan = evalharness.audit_scan(audit)
        print(f"audit: {scan['n_entries']} entries, "
              f"{scan['n_unlocks']} unlock(s), "
              f"{scan['pre_unlock_lockbox_accesses']} pre-unlock held-out "
              f"access(es)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="strokepred",
        description="Synthetic stroke-outcome prediction pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic cohort directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON config file (cohort/truth keys)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--dims", type=int, help="cubic volume edge length")
    sp.add_argument("--force", action="store_true",
                    help="reuse a non-empty output directory")
    sp.set_defaults(func=cmd_synth)

    rp = sub.add_parser("run", help="train and evaluate one variant/model")
    rp.add_argument("--cohort", required=True, help="cohort directory")
    rp.add_argument("--out", help="run directory (default: runs/run-<UTC>)")
    rp.add_argument("--config", help="JSON config file (run key)")
    rp.add_argument("--variant", choices=pipeline.VARIANTS)
    rp.add_argument("--model", choices=learn.MODEL_KINDS)
    rp.add_argument("--seeds", help='e.g. "1-20" or "1,3,9"')
    rp.add_argument("--preset", choices=["paper"],
                    help="full-scale constants (256x256, 6 blocks, 200 epochs)")
    rp.add_argument("--jobs", type=int, help="concurrent seed fits")
    rp.add_argument("--roi-sweep", action="store_true",
                    help="emit ROI ranking + count-selection curve")
    rp.add_argument("--force", action="store_true")
    rp.set_defaults(func=cmd_run)

    ep = sub.add_parser("explain", help="per-image ROI explanations")
    ep.add_argument("--cohort", required=True)
    ep.add_argument("--run", required=True, help="finished run directory")
    ep.add_argument("--out", required=True)
    ep.add_argument("--seed", type=int, help="checkpoint seed (default first)")
    ep.add_argument("--variant", help="must match the run's variant")
    ep.add_argument("--n-explain", type=int, default=12)
    ep.add_argument("--n-perturb", type=int, default=256)
    ep.add_argument("--explain-seed", type=int, default=0)
    ep.add_argument("--force", action="store_true")
    ep.set_defaults(func=cmd_explain)

    kp = sub.add_parser("select-rois", help="ROI-count selection curve")
    kp.add_argument("--cohort", required=True)
    kp.add_argument("--run", required=True)
    kp.add_argument("--out", required=True)
    kp.add_argument("--seed", type=int)
    kp.add_argument("--counts", default="3-10", help='k grid, e.g. "3-10"')
    kp.add_argument("--sweep-epochs", type=int,
                    help="shorter training for the sweep only")
    kp.add_argument("--n-explain", type=int, default=12)
    kp.add_argument("--n-perturb", type=int, default=160)
    kp.add_argument("--explain-seed", type=int, default=0)
    kp.add_argument("--force", action="store_true")
    kp.set_defaults(func=cmd_select_rois)

    tp = sub.add_parser("report", help="print a finished run's summary")
    tp.add_argument("--run", required=True)
    tp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LockBoxError as exc:
        print(f"lock-box violation: {exc}", file=sys.stderr)
        return EXIT_LOCKBOX
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
