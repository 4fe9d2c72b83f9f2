"""Dice scoring, generalization-bound diagnostics, and run reports.

The bound table reports, per source model: its empirical cross-entropy on
its own source, the sliced Wasserstein estimate between its target and
source embedding clouds, and the sample-complexity value
sqrt(2 log(1/xi) / zeta) * (sqrt(1/N_k) + sqrt(1/M)) with N_k and M the
per-domain image counts. The joint-error term requires target labels and a
jointly trained model, so outside oracle mode it is reported as not
computable.

Cross-entropy is the error functional throughout, matching the convexity
argument that makes the aggregated error at most the weighted mean of the
per-model errors.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .network import ce_loss, embed
from .sliced import sample_projections, swd2
from .util import derive_seed


def dice(pred, truth, foreground: int = 1) -> float:
    """Overlap score 2|X∩Y| / (|X|+|Y|) for the given foreground class.

    Both masks empty counts as perfect agreement (1.0).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    a = pred == foreground
    b = truth == foreground
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def model_target_dice(model, dataset, foreground: int = 1) -> float:
    """Pooled Dice of a model's argmax masks over a labeled dataset.

    Reads the dataset's labels (bumps its label_reads counter); use in
    evaluation contexts only.
    """
    pred = np.asarray(model.predict_probs(dataset.image_stack())).argmax(axis=1)
    return dice(pred, dataset.mask_stack(), foreground=foreground)


def mean_ce(model, dataset) -> float:
    """Mean per-pixel cross-entropy of a model over a labeled dataset."""
    logits = model.forward(Tensor(dataset.image_stack()))
    return ce_loss(logits, dataset.mask_stack()).item()


def mixture_target_ce(models, weights, dataset) -> float:
    """Cross-entropy of the weighted probability mixture on a labeled set."""
    images = dataset.image_stack()
    stacked = np.stack([np.asarray(m.predict_probs(images)) for m in models])
    w = np.asarray(weights).reshape((-1,) + (1,) * (stacked.ndim - 1))
    probs = (stacked * w).sum(axis=0)
    labels = dataset.mask_stack()
    picked = np.take_along_axis(probs, labels[:, None, ...], axis=1)[:, 0, ...]
    return float(-np.log(picked).mean())


def complexity_term(n_source: int, n_target: int, xi: float, zeta: float) -> float:
    """sqrt(2 log(1/xi) / zeta) * (sqrt(1/N) + sqrt(1/M))."""
    if not 0.0 < xi <= 1.0:
        raise ValueError(f"xi must be in (0, 1], got {xi}")
    if not 0.0 < zeta < math.sqrt(2.0):
        raise ValueError(f"zeta must be in (0, sqrt(2)), got {zeta}")
    if n_source < 1 or n_target < 1:
        raise ValueError("sample counts must be positive")
    scale = math.sqrt(2.0 * math.log(1.0 / xi) / zeta)
    return scale * (1.0 / math.sqrt(n_source) + 1.0 / math.sqrt(n_target))


@dataclass
class BoundTerm:
    source_id: str
    source_ce: float
    swd_term: float
    complexity: float
    joint_ce: float = None  # None outside oracle mode


def bound_terms(adapted_models, sources, target, swd_L: int, embed_sites: int,
                seed: int, xi: float = 0.05, zeta: float = 1.0,
                joint_errors: dict = None) -> list:
    """Per-source diagnostic terms of the target-error upper bound."""
    out = []
    proj_seed = derive_seed(seed, "bound-projections")
    for am, source in zip(adapted_models, sources):
        model = am.model
        proj = sample_projections(swd_L, model.config.latent_dim, seed=proj_seed)
        src_emb = embed(model, Tensor(source.image_stack()), embed_sites,
                        seed=derive_seed(seed, "bound-src", source.domain_id),
                        domain_tag=source.domain_id)
        tgt_emb = embed(model, Tensor(target.image_stack()), embed_sites,
                        seed=derive_seed(seed, "bound-tgt", source.domain_id),
                        domain_tag=target.domain_id)
        joint = None if joint_errors is None else joint_errors.get(am.source_id)
        out.append(BoundTerm(
            source_id=am.source_id,
            source_ce=mean_ce(model, source),
            swd_term=swd2(tgt_emb, src_emb, proj).item(),
            complexity=complexity_term(len(source), len(target), xi, zeta),
            joint_ce=joint,
        ))
    return out


def bound_right_hand_side(terms, weights) -> float:
    """Weighted sum of the per-source terms; requires measured joint errors."""
    total = 0.0
    for term, w in zip(terms, weights):
        if term.joint_ce is None:
            raise ValueError(f"joint error for '{term.source_id}' was not measured")
        total += w * (term.source_ce + term.swd_term + term.complexity + term.joint_ce)
    return total


def measure_joint_error(source, target_labeled, plan, config) -> float:
    """Joint-training error term: train one model on source plus labeled
    target, return its source CE plus target CE. Oracle-mode only."""
    from .data import DomainDataset
    from .training import TrainPlan, pretrain

    union = DomainDataset(
        [im.copy() for im in source.images] + [im.copy() for im in target_labeled.images],
        [m.copy() for m in source.masks] + [m.copy() for m in target_labeled.masks],
        domain_id=f"{source.domain_id}+{target_labeled.domain_id}",
    )
    joint_plan = TrainPlan(
        epochs_pretrain=plan.epochs_pretrain, epochs_adapt=0,
        batch_size=plan.batch_size, gamma=plan.gamma, swd_L=plan.swd_L,
        lambda_conf=plan.lambda_conf,
        seed=derive_seed(plan.seed, "joint", source.domain_id),
        embed_sites=plan.embed_sites, learning_rate=plan.learning_rate,
        beta1=plan.beta1, beta2=plan.beta2, epsilon=plan.epsilon,
    )
    star = pretrain(union, joint_plan, config)
    return mean_ce(star, source) + mean_ce(star, target_labeled)


# -- reporting -------------------------------------------------------------------


@dataclass
class MetricsReport:
    seed: int
    oracle_mode: bool
    aggregation: str = "fmuda"
    settings: dict = field(default_factory=dict)   # flat config snapshot
    raw_counts: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    source_ids: list = field(default_factory=list)
    lambda_conf: float = 0.3
    uniform_fallback: bool = False
    per_model_dice: dict = field(default_factory=dict)      # id -> (pre, post)
    ensemble_dice: dict = field(default_factory=dict)       # method -> dice
    bound: list = field(default_factory=list)               # BoundTerm entries
    bound_lhs: float = None
    bound_rhs: float = None
    timestamp: str = ""


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: MetricsReport, path):
    """Write the report as a key: value header plus CSV tables."""
    lines = ["# fedseg run report", "format_version: 1"]
    lines.append(f"timestamp: {report.timestamp or time.strftime('%Y-%m-%dT%H:%M:%S')}")
    lines.append(f"seed: {report.seed}")
    lines.append(f"oracle_mode: {str(report.oracle_mode).lower()}")
    lines.append(f"aggregation: {report.aggregation}")
    lines.append(f"lambda_conf: {_fmt(report.lambda_conf)}")
    lines.append(f"uniform_fallback: {str(report.uniform_fallback).lower()}")
    for key in sorted(report.settings):
        lines.append(f"{key}: {_fmt(report.settings[key])}")
    if not report.oracle_mode:
        lines.append("e_C: not computable")
    if report.bound_lhs is not None:
        lines.append(f"bound_lhs: {_fmt(report.bound_lhs)}")
        lines.append(f"bound_rhs: {_fmt(report.bound_rhs)}")
        lines.append(f"bound_holds: {str(report.bound_lhs <= report.bound_rhs).lower()}")

    lines.append("")
    lines.append("[weights]")
    lines.append("source_id,raw_count,weight")
    for sid, c, w in zip(report.source_ids, report.raw_counts, report.weights):
        lines.append(f"{sid},{c},{_fmt(float(w))}")

    if report.bound:
        lines.append("")
        lines.append("[bound_terms]")
        lines.append("source_id,source_ce,swd_term,complexity_term,joint_ce")
        for t in report.bound:
            joint = "not computable" if t.joint_ce is None else _fmt(float(t.joint_ce))
            lines.append(
                f"{t.source_id},{_fmt(float(t.source_ce))},{_fmt(float(t.swd_term))},"
                f"{_fmt(float(t.complexity))},{joint}"
            )

    if report.per_model_dice:
        lines.append("")
        lines.append("[per_model_dice]")
        lines.append("source_id,pre_adapt,post_adapt")
        for sid in report.source_ids:
            pre, post = report.per_model_dice[sid]
            lines.append(f"{sid},{_fmt(float(pre))},{_fmt(float(post))}")

    if report.ensemble_dice:
        lines.append("")
        lines.append("[dice]")
        lines.append("method,dice")
        for method in sorted(report.ensemble_dice):
            lines.append(f"{method},{_fmt(float(report.ensemble_dice[method]))}")

    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report(path) -> dict:
    """Parse a report back into {'header': dict, 'tables': {name: rows}}."""
    header, tables = {}, {}
    table = None
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                table = []
                tables[line[1:-1]] = table
                continue
            if table is not None:
                table.append(line.split(","))
            else:
                key, value = line.split(":", 1)
                header[key.strip()] = value.strip()
    return {"header": header, "tables": tables}


def export_embeddings(batches, path):
    """CSV of latent codes: domain_tag, dim_0 .. dim_{d-1} per row."""
    dims = batches[0].dim
    lines = ["domain_tag," + ",".join(f"dim_{i}" for i in range(dims))]
    for batch in batches:
        if batch.dim != dims:
            raise ValueError(f"embedding dims differ: {dims} vs {batch.dim}")
        for row in batch.points.data:
            lines.append(batch.domain_tag + "," + ",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
