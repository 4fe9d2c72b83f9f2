"""Command-line pipeline driver: gen, run, eval, sweep, audit.

Exit codes are a stable scripting contract: 0 success, 1 usage error
(bad flags, invalid values, refused overwrite), 2 runtime error. Every
subcommand honors --seed and is reproducible; reports differ across
identical runs only in the timestamp line.

Evaluation modes that report Dice (oracle mode, sweeps, suda aggregation)
read target labels; plain runs never do, which the audit counter verifies.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from .autodiff import load_params, save_params
from .benchmark import benchmark_shifts
from .data import (DomainShift, ManifestEntry, generate_domains, load_domain,
                   read_manifest, write_manifest, write_raster)
from .ensembling import (EnsembleWeights, add_source, aggregate, average_vote,
                         compute_weights, popular_vote)
from .evaluation import (MetricsReport, bound_right_hand_side, bound_terms, dice,
                         emit_report, export_embeddings, measure_joint_error,
                         mixture_target_ce, model_target_dice)
from .federation import AuditLog, audit_check, run_msuda
from .network import NetConfig, SegModel, embed
from .training import AdaptedModel, TrainPlan, write_step_log
from .util import derive_seed


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- argument plumbing -----------------------------------------------------------


def _add_net_flags(p):
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--no-skips", action="store_true",
                   help="disable latent reinjection in the decoder")


def _add_plan_flags(p):
    p.add_argument("--epochs-pretrain", type=int, default=30)
    p.add_argument("--epochs-adapt", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--gamma", type=float, default=1.0,
                   help="weight of the distribution-alignment term")
    p.add_argument("--swd-l", type=int, default=50,
                   help="number of random projections")
    p.add_argument("--lambda", dest="lambda_conf", type=float, default=0.3,
                   help="confidence threshold for ensemble weights")
    p.add_argument("--sites", type=int, default=64,
                   help="embedding sites sampled per image")
    p.add_argument("--lr", type=float, default=1e-3)


def _net_config(args) -> NetConfig:
    return NetConfig(spatial_rank=2, in_channels=1, num_classes=2,
                     depth=args.depth, base_width=args.base_width,
                     latent_dim=args.latent_dim,
                     skip_connections=not args.no_skips)


def _plan(args) -> TrainPlan:
    try:
        return TrainPlan(
            epochs_pretrain=args.epochs_pretrain, epochs_adapt=args.epochs_adapt,
            batch_size=args.batch_size, gamma=args.gamma, swd_L=args.swd_l,
            lambda_conf=args.lambda_conf, seed=args.seed, embed_sites=args.sites,
            learning_rate=args.lr,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _settings(plan: TrainPlan, config: NetConfig) -> dict:
    out = {f"plan.{k}": v for k, v in dataclasses.asdict(plan).items()}
    out.update({f"net.{k}": v for k, v in dataclasses.asdict(config).items()})
    return out


def _load_datasets(manifest_path, oracle_mode):
    if not os.path.exists(manifest_path):
        raise UsageError(f"manifest not found: {manifest_path}")
    header, entries = read_manifest(manifest_path)
    sources, targets = [], []
    for entry in entries:
        if entry.role == "source":
            sources.append(load_domain(manifest_path, entry, read_masks=True))
        else:
            targets.append(load_domain(manifest_path, entry, read_masks=oracle_mode))
    if not sources or len(targets) != 1:
        raise UsageError(
            f"manifest must designate >=1 source and exactly 1 target, found "
            f"{len(sources)} sources and {len(targets)} targets"
        )
    return header, sources, targets[0]


def _prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


# -- gen -----------------------------------------------------------------------


def _palette_shift(rng, index) -> DomainShift:
    return DomainShift(
        intensity_gain=float(rng.uniform(0.7, 1.5)),
        intensity_offset=float(rng.uniform(-0.2, 0.3)),
        noise_sigma=0.03,
        bias_field_amplitude=0.05,
        seed=int(index + 1) * 17,
    )


def cmd_gen(args) -> int:
    _prepare_out(args.out, args.force)
    names = [f"site_{chr(ord('a') + i)}" for i in range(args.domains - 1)]
    names.append("site_t" if args.domains > 1 else "site_a")
    if args.domains == 3 and not args.palette:
        shifts = benchmark_shifts(corrupted=args.corrupted)
        names = ["site_a", "site_b", "site_t"]
        shift_list = [shifts[n] for n in names]
    else:
        rng = np.random.default_rng(derive_seed(args.seed, "gen-palette"))
        shift_list = [_palette_shift(rng, i) for i in range(args.domains - 1)]
        shift_list.append(DomainShift(0.25, 0.55, 0.02, 0.05, seed=173))
        if args.domains == 1:
            shift_list = shift_list[-1:]
    domains = generate_domains(derive_seed(args.seed, "benchmark-phantoms"),
                               args.domains, args.images,
                               (args.size, args.size), shift_list)
    entries = []
    for ds, name, shift in zip(domains, names, shift_list):
        ds.domain_id = name
        role = "target" if name == names[-1] and args.domains > 1 else "source"
        ddir = os.path.join(args.out, name)
        os.makedirs(ddir, exist_ok=True)
        entry = ManifestEntry(name, role, shift)
        for i, (img, msk) in enumerate(zip(ds.images, ds.masks)):
            write_raster(os.path.join(ddir, f"img_{i:03d}.ndr"), img)
            write_raster(os.path.join(ddir, f"msk_{i:03d}.ndr"), msk)
            entry.image_paths.append(f"{name}/img_{i:03d}.ndr")
            entry.mask_paths.append(f"{name}/msk_{i:03d}.ndr")
        entries.append(entry)
        print(f"{name} ({role}): {len(ds)} images "
              f"gain={shift.intensity_gain} offset={shift.intensity_offset} "
              f"noise={shift.noise_sigma} bias={shift.bias_field_amplitude}")
    write_manifest(os.path.join(args.out, "manifest.txt"), entries,
                   base_seed=args.seed, num_classes=2)
    print(f"manifest: {os.path.join(args.out, 'manifest.txt')}")
    return 0


# -- shared run/eval machinery ----------------------------------------------------


def _write_ensemble(path, weights: EnsembleWeights, source_ids):
    lines = [f"lambda_conf: {weights.lambda_conf!r}",
             f"target_hash: {weights.target_hash}",
             f"uniform_fallback: {str(weights.uniform_fallback).lower()}",
             "source_id,raw_count"]
    for sid, count in zip(source_ids, weights.raw_counts):
        lines.append(f"{sid},{count}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_ensemble(path):
    header, counts, ids = {}, [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line == "source_id,raw_count":
                continue
            if ":" in line:
                key, value = line.split(":", 1)
                header[key.strip()] = value.strip()
            else:
                sid, count = line.split(",")
                ids.append(sid)
                counts.append(int(count))
    total = sum(counts)
    if total == 0:
        weights = [1.0 / len(counts)] * len(counts)
    else:
        weights = [c / total for c in counts]
    return ids, EnsembleWeights(counts, weights, float(header["lambda_conf"]),
                                header.get("uniform_fallback") == "true",
                                header.get("target_hash", ""))


def _predictions(models, weights, target, mode, seed):
    images = target.image_stack()
    if mode == "fmuda":
        return aggregate(models, weights, images).mask
    if mode == "av":
        return average_vote(models, images, seed=seed).mask
    if mode == "pv":
        return popular_vote(models, images, seed=seed)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _evaluate(models, weights, sources, target, plan, config, oracle, mode, seed,
              pretrained=None, with_bound=True):
    """Build the MetricsReport and the output masks for one model set."""
    report = MetricsReport(seed=seed, oracle_mode=oracle, aggregation=mode,
                           settings=_settings(plan, config))
    report.settings["audit.target_label_reads_before_eval"] = target.label_reads
    report.source_ids = [m.source_id for m in models]
    report.raw_counts = list(weights.raw_counts)
    report.weights = list(weights.weights)
    report.lambda_conf = weights.lambda_conf
    report.uniform_fallback = weights.uniform_fallback

    if with_bound:
        joint = None
        if oracle:
            joint = {src.domain_id: measure_joint_error(src, target, plan, config)
                     for src in sources}
        report.bound = bound_terms(models, sources, target, plan.swd_L,
                                   plan.embed_sites, seed=derive_seed(seed, "bound"),
                                   joint_errors=joint)

    best_idx = 0
    if oracle:
        for am in models:
            pre = float("nan")
            if pretrained and am.source_id in pretrained:
                pre = model_target_dice(pretrained[am.source_id], target)
            report.per_model_dice[am.source_id] = (
                pre, model_target_dice(am.model, target))
        post = {sid: d for sid, (_, d) in report.per_model_dice.items()}
        best_idx = report.source_ids.index(max(post, key=post.get))
        images = target.image_stack()
        truth = target.mask_stack()
        report.ensemble_dice = {
            "fmuda": dice(aggregate(models, weights, images).mask, truth),
            "av": dice(average_vote(models, images, seed=seed).mask, truth),
            "pv": dice(popular_vote(models, images, seed=seed), truth),
            "suda": max(post.values()),
        }
        if with_bound:
            report.bound_lhs = mixture_target_ce(models, weights.weights, target)
            report.bound_rhs = bound_right_hand_side(terms=report.bound,
                                                     weights=weights.weights)

    if mode == "suda":
        masks = np.asarray(
            models[best_idx].predict_probs(target.image_stack())).argmax(axis=1)
    else:
        masks = _predictions(models, weights, target, mode, seed)
    return report, masks.astype(np.uint8)


def _write_outputs(out_dir, report, masks, mode, models, target, plan,
                   audit_log=None):
    emit_report(report, os.path.join(out_dir, "report.txt"))
    mask_dir = os.path.join(out_dir, "masks", mode)
    os.makedirs(mask_dir, exist_ok=True)
    for i in range(masks.shape[0]):
        write_raster(os.path.join(mask_dir, f"pred_{i:03d}.ndr"), masks[i])
    if audit_log is not None:
        audit_log.write(os.path.join(out_dir, "audit.log"))
    batches = []
    for am in models:
        batches.append(embed(am.model, target.image_stack(), plan.embed_sites,
                             seed=derive_seed(plan.seed, "export", am.source_id),
                             domain_tag=f"{am.source_id}/target_post"))
    export_embeddings(batches, os.path.join(out_dir, "embeddings.csv"))


def cmd_run(args) -> int:
    oracle = args.oracle
    if args.aggregation == "suda" and not oracle:
        raise UsageError("--aggregation suda needs --oracle (selects by target Dice)")
    header, sources, target = _load_datasets(args.data, oracle)
    plan = _plan(args)
    config = _net_config(args)

    if args.add_source:
        return _run_add_source(args, sources, target, plan, config)

    _prepare_out(args.out, args.force)
    workers = args.workers or len(sources)
    result = run_msuda(sources, target, plan, config, oracle_mode=oracle,
                       workers=workers)

    ckpt_dir = os.path.join(args.out, "checkpoints")
    curve_dir = os.path.join(args.out, "curves")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(curve_dir, exist_ok=True)
    for am in result.adapted.models:
        save_params(result.pretrained[am.source_id].state_dict(),
                    os.path.join(ckpt_dir, f"{am.source_id}_pretrained.fpar"))
        save_params(am.model.state_dict(),
                    os.path.join(ckpt_dir, f"{am.source_id}_adapted.fpar"))
        write_step_log(am, os.path.join(curve_dir, f"{am.source_id}.csv"))
    _write_ensemble(os.path.join(args.out, "ensemble.txt"), result.weights,
                    result.adapted.source_ids())

    report, masks = _evaluate(result.adapted.models, result.weights, sources,
                              target, plan, config, oracle, args.aggregation,
                              args.seed, pretrained=result.pretrained)
    report.settings["audit.target_label_reads"] = target.label_reads
    if not oracle and target.label_reads != 0:
        raise RuntimeError("target labels were read outside oracle mode")
    _write_outputs(args.out, report, masks, args.aggregation,
                   result.adapted.models, target, plan,
                   audit_log=result.audit_log)
    print(f"run complete: {args.out} "
          f"(weights {[round(w, 4) for w in result.weights.weights]})")
    return 0


def _load_models_from_checkpoints(run_dir, source_ids, config):
    models = []
    for sid in source_ids:
        path = os.path.join(run_dir, "checkpoints", f"{sid}_adapted.fpar")
        if not os.path.exists(path):
            raise UsageError(f"missing checkpoint {path}")
        model = SegModel(config, seed=0)
        model.load_state_dict(load_params(path))
        models.append(AdaptedModel(model=model, source_id=sid))
    return models


def _run_add_source(args, sources, target, plan, config) -> int:
    from .training import adapt, pretrain

    by_id = {ds.domain_id: ds for ds in sources}
    if args.add_source not in by_id:
        raise UsageError(f"--add-source {args.add_source!r} not in the manifest")
    ensemble_path = os.path.join(args.out, "ensemble.txt")
    if not os.path.exists(ensemble_path):
        raise UsageError(f"{args.out} holds no ensemble.txt; run without "
                         f"--add-source first")
    ids, weights = _read_ensemble(ensemble_path)
    if args.add_source in ids:
        raise UsageError(f"source {args.add_source!r} already in the ensemble")

    existing = _load_models_from_checkpoints(args.out, ids, config)
    new_source = by_id[args.add_source]
    local_plan = dataclasses.replace(
        plan, seed=derive_seed(plan.seed, "node", new_source.domain_id))
    pre = pretrain(new_source, local_plan, config)
    adapted = adapt(pre, new_source, target.unlabeled_copy(), local_plan)

    ckpt_dir = os.path.join(args.out, "checkpoints")
    save_params(pre.state_dict(),
                os.path.join(ckpt_dir, f"{adapted.source_id}_pretrained.fpar"))
    save_params(adapted.model.state_dict(),
                os.path.join(ckpt_dir, f"{adapted.source_id}_adapted.fpar"))
    write_step_log(adapted, os.path.join(args.out, "curves",
                                         f"{adapted.source_id}.csv"))

    updated = add_source(existing, weights, adapted, target.image_stack())
    all_models = existing + [adapted]
    _write_ensemble(os.path.join(args.out, "ensemble.txt"), updated,
                    [m.source_id for m in all_models])

    missing = [m.source_id for m in all_models if m.source_id not in by_id]
    if missing:
        raise UsageError(f"manifest lacks source domains {missing} from the run")
    eval_sources = [by_id[m.source_id] for m in all_models]
    report, masks = _evaluate(all_models, updated, eval_sources, target, plan,
                              config, args.oracle, args.aggregation, args.seed)
    _write_outputs(args.out, report, masks, args.aggregation, all_models,
                   target, plan)
    print(f"added source {args.add_source}: weights "
          f"{[round(w, 4) for w in updated.weights]}")
    return 0


def cmd_eval(args) -> int:
    oracle = args.oracle
    if args.aggregation == "suda" and not oracle:
        raise UsageError("--aggregation suda needs --oracle (selects by target Dice)")
    header, sources, target = _load_datasets(args.data, oracle)
    config = _net_config(args)
    ensemble_path = os.path.join(args.run, "ensemble.txt")
    if not os.path.exists(ensemble_path):
        raise UsageError(f"{args.run} holds no ensemble.txt (not a run directory?)")
    ids, weights = _read_ensemble(ensemble_path)
    models = _load_models_from_checkpoints(args.run, ids, config)
    if args.lambda_conf is not None and args.lambda_conf != weights.lambda_conf:
        weights = compute_weights(models, target.image_stack(), args.lambda_conf)
    plan = TrainPlan(seed=args.seed, lambda_conf=weights.lambda_conf,
                     swd_L=args.swd_l, embed_sites=args.sites)
    out_dir = args.out or os.path.join(args.run, "eval")
    os.makedirs(out_dir, exist_ok=True)
    by_id = {ds.domain_id: ds for ds in sources}
    missing = [sid for sid in ids if sid not in by_id]
    if missing:
        raise UsageError(f"manifest lacks source domains {missing} from the run")
    eval_sources = [by_id[sid] for sid in ids]
    report, masks = _evaluate(models, weights, eval_sources, target, plan,
                              config, oracle, args.aggregation, args.seed,
                              with_bound=False)
    _write_outputs(out_dir, report, masks, args.aggregation, models, target, plan)
    print(f"eval complete: {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    values = [v for v in (s.strip() for s in args.values.split(",")) if v]
    if not values:
        raise UsageError("--values is empty")
    if args.parameter == "lambda":
        parsed = [float(v) for v in values]
        if any(not 0.0 < v < 1.0 for v in parsed):
            raise UsageError(f"lambda values must lie in (0,1): {parsed}")
    elif args.parameter == "L":
        parsed = [int(v) for v in values]
        if any(v < 1 for v in parsed):
            raise UsageError(f"L values must be >= 1: {parsed}")
    else:  # gamma
        parsed = [float(v) for v in values]
        if any(v < 0 for v in parsed):
            raise UsageError(f"gamma values must be >= 0: {parsed}")

    header, sources, target = _load_datasets(args.data, oracle_mode=True)
    plan = _plan(args)
    config = _net_config(args)
    _prepare_out(args.out, args.force)
    truth = target.mask_stack()
    images = target.image_stack()

    rows = []
    if args.parameter == "lambda":
        result = run_msuda(sources, target, plan, config, oracle_mode=True,
                           workers=args.workers or len(sources))
        for lam in parsed:
            weights = compute_weights(result.adapted.models, images, lam)
            score = dice(aggregate(result.adapted.models, weights, images).mask, truth)
            rows.append((lam, score))
    else:
        field = "swd_L" if args.parameter == "L" else "gamma"
        for value in parsed:
            variant = dataclasses.replace(plan, **{field: value})
            result = run_msuda(sources, target, variant, config, oracle_mode=True,
                               workers=args.workers or len(sources))
            score = dice(aggregate(result.adapted.models, result.weights,
                                   images).mask, truth)
            rows.append((value, score))

    csv_path = os.path.join(args.out, f"sweep_{args.parameter}.csv")
    with open(csv_path, "w") as fh:
        fh.write("value,dice\n")
        for value, score in rows:
            fh.write(f"{value},{score!r}\n")
    for value, score in rows:
        print(f"{args.parameter}={value}: dice={score:.4f}")
    print(f"sweep CSV: {csv_path}")
    return 0


def cmd_audit(args) -> int:
    if not os.path.exists(args.log):
        raise UsageError(f"audit log not found: {args.log}")
    report = audit_check(AuditLog.read(args.log))
    if report.ok:
        print("audit: pass")
        return 0
    print(f"audit: FAIL at record {report.violation_index}: {report.reason}")
    return 2


# -- entry point --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="fedseg",
                     description="Federated multi-source domain adaptation "
                                 "for segmentation, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--images", type=int, default=12)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupted", action="store_true",
                   help="replace the second source with the signal-dead scanner")
    p.add_argument("--palette", action="store_true",
                   help="use generated shifts even for 3 domains")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("run", help="train, adapt, ensemble, and report")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregation", choices=("fmuda", "pv", "av", "suda"),
                   default="fmuda")
    p.add_argument("--oracle", action="store_true",
                   help="read target labels for evaluation quantities")
    p.add_argument("--workers", type=int, default=0,
                   help="parallel source trainings (default: one per source)")
    p.add_argument("--add-source", default=None,
                   help="train only this manifest domain and update the ensemble")
    p.add_argument("--force", action="store_true")
    _add_plan_flags(p)
    _add_net_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="re-evaluate checkpoints from a prior run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="directory of a prior run")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregation", choices=("fmuda", "pv", "av", "suda"),
                   default="fmuda")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--lambda", dest="lambda_conf", type=float, default=None,
                   help="recompute weights at this threshold (default: stored)")
    p.add_argument("--swd-l", type=int, default=50)
    p.add_argument("--sites", type=int, default=64)
    _add_net_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter sensitivity sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parameter", choices=("lambda", "L", "gamma"), required=True)
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--force", action="store_true")
    _add_plan_flags(p)
    _add_net_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("audit", help="check an exported audit log")
    p.add_argument("--log", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_audit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures get the module-tagged contract
        print(f"[{args.command}] error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
