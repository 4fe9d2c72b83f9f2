"""Per-source training: ERM pretraining and alignment-regularized adaptation.

Adaptation minimizes, per step, the supervised cross-entropy on a source
batch plus gamma times the sliced Wasserstein distance between source and
target latent embeddings. Target labels are never read; the caller can
verify via the dataset's label_reads counter, and the returned record keeps
a snapshot of it.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, add, mul
from .data import DomainDataset
from .network import NetConfig, SegModel, ce_loss, embed
from .sliced import sample_projections, swd2
from .util import derive_seed


@dataclass
class TrainPlan:
    """Hyperparameters for one pretrain + adapt cycle."""

    epochs_pretrain: int = 30
    epochs_adapt: int = 30
    batch_size: int = 4
    gamma: float = 1.0
    swd_L: int = 50
    lambda_conf: float = 0.3
    seed: int = 0
    embed_sites: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs_pretrain < 0 or self.epochs_adapt < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.swd_L < 1 or self.embed_sites < 1:
            raise ValueError("batch_size, swd_L and embed_sites must be >= 1")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.lambda_conf < 1.0:
            raise ValueError(f"lambda_conf must be in (0,1), got {self.lambda_conf}")

    def make_optimizer(self, params) -> Adam:
        return Adam(params, learning_rate=self.learning_rate, beta1=self.beta1,
                    beta2=self.beta2, epsilon=self.epsilon)


@dataclass
class EpochRecord:
    supervised_loss: float
    swd: float
    target_dice: float = float("nan")


@dataclass
class AdaptedModel:
    """A source-adapted model plus its adaptation trace."""

    model: SegModel
    source_id: str
    history: list = field(default_factory=list)           # EpochRecord per epoch
    step_records: list = field(default_factory=list)      # (step, ce, swd, total)
    target_label_reads: int = 0

    def predict_probs(self, images):
        return self.model.predict_probs(images)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain(source: DomainDataset, plan: TrainPlan, config: NetConfig) -> SegModel:
    """Train a fresh model on the labeled source by empirical risk minimization."""
    if not source.has_masks:
        raise ValueError(f"pretrain requires labels, domain '{source.domain_id}' has none")
    model = SegModel(config, seed=derive_seed(plan.seed, "init"))
    if plan.epochs_pretrain == 0:
        return model
    images = source.image_stack()
    masks = source.mask_stack()
    opt = plan.make_optimizer(model.parameters())
    rng = np.random.default_rng(derive_seed(plan.seed, "pretrain"))
    for _ in range(plan.epochs_pretrain):
        for idx in _batches(len(source), plan.batch_size, rng):
            loss = ce_loss(model.forward(Tensor(images[idx])), masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def adapt(model: SegModel, source: DomainDataset, target_unlabeled: DomainDataset,
          plan: TrainPlan, eval_fn=None) -> AdaptedModel:
    """Tune a pretrained model toward the target domain.

    Per step the objective is ce(source batch) + gamma * swd2 between the
    source and target embedding batches, with fresh projections each step.
    The input model is left untouched; a warm-started copy is trained.
    eval_fn, when given, is called with the model after every epoch and its
    result stored as the epoch's target_dice (evaluation use only).
    """
    if not source.has_masks:
        raise ValueError(f"adapt requires source labels, '{source.domain_id}' has none")
    src_shape = source.images[0].shape
    tgt_shape = target_unlabeled.images[0].shape
    if src_shape != tgt_shape:
        raise ValueError(
            f"source images {src_shape} and target images {tgt_shape} disagree"
        )

    label_reads_before = target_unlabeled.label_reads
    adapted = model.clone()
    src_images = source.image_stack()
    src_masks = source.mask_stack()
    tgt_images = target_unlabeled.image_stack()
    opt = plan.make_optimizer(adapted.parameters())
    rng = np.random.default_rng(derive_seed(plan.seed, "adapt", source.domain_id))
    d_latent = adapted.config.latent_dim

    history, step_records = [], []
    step = 0
    for epoch in range(plan.epochs_adapt):
        ce_vals, swd_vals = [], []
        for idx in _batches(len(source), plan.batch_size, rng):
            tgt_idx = rng.choice(len(target_unlabeled), size=len(idx),
                                 replace=len(target_unlabeled) < len(idx))
            proj = sample_projections(
                plan.swd_L, d_latent, seed=derive_seed(plan.seed, "proj", step)
            )
            sup = ce_loss(adapted.forward(Tensor(src_images[idx])), src_masks[idx])
            src_emb = embed(adapted, Tensor(src_images[idx]), plan.embed_sites,
                            seed=derive_seed(plan.seed, "sites-src", step),
                            domain_tag=source.domain_id)
            tgt_emb = embed(adapted, Tensor(tgt_images[tgt_idx]), plan.embed_sites,
                            seed=derive_seed(plan.seed, "sites-tgt", step),
                            domain_tag=target_unlabeled.domain_id)
            alignment = swd2(src_emb, tgt_emb, proj)
            total = add(sup, mul(alignment, plan.gamma))
            opt.zero_grad()
            total.backward()
            opt.step()
            ce_vals.append(sup.item())
            swd_vals.append(alignment.item())
            step_records.append((step, sup.item(), alignment.item(), total.item()))
            step += 1
        record = EpochRecord(float(np.mean(ce_vals)), float(np.mean(swd_vals)))
        if eval_fn is not None:
            record.target_dice = float(eval_fn(adapted))
        history.append(record)

    return AdaptedModel(
        model=adapted,
        source_id=source.domain_id,
        history=history,
        step_records=step_records,
        target_label_reads=target_unlabeled.label_reads - label_reads_before,
    )


def write_step_log(adapted: AdaptedModel, path):
    """Per-step adaptation trace as CSV: step, ce, swd, total."""
    lines = ["step,ce,swd,total"]
    for step, ce, swd_val, total in adapted.step_records:
        lines.append(f"{step},{ce!r},{swd_val!r},{total!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
