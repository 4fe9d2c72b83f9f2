"""In-process federation: one node per source domain plus a target node.

All cross-node traffic goes through a message bus that deep-copies payloads
and appends an audit record per transfer. The bus refuses to carry image
data between two source nodes, and labeled data is not a payload kind at
all, so the privacy constraint (no data sharing between sources, no target
labels leaving the target) holds by construction. Model parameters may flow
source to target for ensembling.

Per-node RNG streams derive from the node name plus the master seed, so the
result is independent of scheduling order and source trainings may run in
parallel.
"""

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .autodiff import serialize_params
from .data import DomainDataset
from .ensembling import AdaptedModelSet, EnsembleWeights, add_source, compute_weights
from .evaluation import model_target_dice
from .network import NetConfig
from .training import TrainPlan, adapt, pretrain
from .util import derive_seed

PAYLOAD_KINDS = ("model_params", "unlabeled_images", "weights", "prediction", "metrics")


@dataclass(frozen=True)
class NodeId:
    name: str
    kind: str  # "source" or "target"

    def __post_init__(self):
        if self.kind not in ("source", "target"):
            raise ValueError(f"node kind must be source or target, got {self.kind!r}")


@dataclass
class Message:
    sender: NodeId
    receiver: NodeId
    payload_kind: str
    byte_size: int


class AuditLog:
    """Append-only record of every bus transfer in a run."""

    def __init__(self):
        self._records = []

    def append(self, message: Message):
        self._records.append(message)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def __len__(self):
        return len(self._records)

    def write(self, path):
        lines = ["# from_name,from_kind,to_name,to_kind,payload_kind,byte_size"]
        for m in self._records:
            lines.append(
                f"{m.sender.name},{m.sender.kind},{m.receiver.name},"
                f"{m.receiver.kind},{m.payload_kind},{m.byte_size}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "AuditLog":
        log = cls()
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != 6:
                    raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
                log.append(Message(
                    sender=NodeId(parts[0], parts[1]),
                    receiver=NodeId(parts[2], parts[3]),
                    payload_kind=parts[4],
                    byte_size=int(parts[5]),
                ))
        return log


@dataclass
class AuditReport:
    ok: bool
    violation_index: int = -1
    reason: str = ""

    def __bool__(self):
        return self.ok


def audit_check(log: AuditLog) -> AuditReport:
    """Verify the data-privacy rules over a complete log.

    Image data may only originate at the target node, which also implies it
    never moves between two sources. Model parameters, weights, predictions
    and metrics may flow anywhere. Fails on the first violating record.
    """
    for i, m in enumerate(log.records):
        if m.payload_kind not in PAYLOAD_KINDS:
            return AuditReport(False, i, f"record {i}: unknown payload kind "
                                         f"{m.payload_kind!r}")
        if m.byte_size < 0:
            return AuditReport(False, i, f"record {i}: negative byte_size")
        if m.payload_kind == "unlabeled_images" and m.sender.kind != "target":
            return AuditReport(
                False, i,
                f"record {i}: unlabeled_images sent by {m.sender.kind} node "
                f"'{m.sender.name}' (only the target node may send image data)",
            )
    return AuditReport(True)


class MessageBus:
    """Mediates and logs every cross-node transfer, copying payloads."""

    def __init__(self):
        self.log = AuditLog()

    def send(self, sender: NodeId, receiver: NodeId, payload_kind: str, payload):
        if payload_kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {payload_kind!r}")
        if payload_kind == "unlabeled_images":
            if sender.kind != "target":
                raise ValueError(
                    f"bus refuses image data from {sender.kind} node '{sender.name}'"
                )
            copied = [img.copy() for img in payload]
            size = sum(img.nbytes for img in copied)
        elif payload_kind == "model_params":
            copied = bytes(payload)
            size = len(copied)
        elif payload_kind == "weights":
            copied = list(payload)
            size = 8 * len(copied)
        else:  # prediction, metrics
            copied = payload.copy() if hasattr(payload, "copy") else payload
            size = getattr(copied, "nbytes", len(str(copied).encode()))
        self.log.append(Message(sender, receiver, payload_kind, size))
        return copied


@dataclass
class Node:
    node_id: NodeId
    dataset: DomainDataset = None
    received: dict = field(default_factory=dict)


@dataclass
class FederationResult:
    adapted: AdaptedModelSet
    weights: EnsembleWeights
    audit_log: AuditLog
    pretrained: dict            # source_id -> SegModel snapshot before adaptation
    config: NetConfig
    plan: TrainPlan
    oracle_mode: bool
    target_label_reads: int


def _validate_domains(sources, target, num_classes):
    if not sources:
        raise ValueError("need at least one source domain")
    shape = target.images[0].shape
    names = set()
    label_sets = []
    for ds in sources:
        if ds.domain_id in names or ds.domain_id == target.domain_id:
            raise ValueError(f"duplicate domain id '{ds.domain_id}'")
        names.add(ds.domain_id)
        if not ds.has_masks:
            raise ValueError(f"source '{ds.domain_id}' has no labels")
        if ds.images[0].shape != shape:
            raise ValueError(
                f"domain '{ds.domain_id}' images {ds.images[0].shape} != target {shape}"
            )
        observed = set()
        for m in ds.masks:
            observed.update(int(v) for v in set(m.ravel().tolist()))
        label_sets.append(observed)
        if max(observed) >= num_classes:
            raise ValueError(
                f"domain '{ds.domain_id}' uses label {max(observed)} outside "
                f"[0, {num_classes})"
            )
    if any(s != label_sets[0] for s in label_sets[1:]):
        raise ValueError(f"class sets differ across sources: {label_sets}")


def _train_source(node: Node, plan: TrainPlan, config: NetConfig, eval_fn):
    """Pretrain on the node's own data, then adapt toward the received
    target images. Runs entirely within the node."""
    local_plan = dataclasses.replace(
        plan, seed=derive_seed(plan.seed, "node", node.node_id.name)
    )
    pre = pretrain(node.dataset, local_plan, config)
    target_images = node.received["unlabeled_images"]
    target_view = DomainDataset(target_images, None, domain_id="target-view")
    adapted = adapt(pre, node.dataset, target_view, local_plan, eval_fn=eval_fn)
    return pre, adapted


def run_msuda(sources, target, plan: TrainPlan, config: NetConfig,
              oracle_mode: bool = False, workers: int = 1,
              epoch_eval: bool = False) -> FederationResult:
    """Per-source pretrain + adapt, then confidence-weighted ensembling.

    Target images are broadcast to every source node over the bus; adapted
    model parameters flow back to the target node, which computes the
    ensemble weights. oracle_mode additionally evaluates against target
    labels (epoch_eval attaches a per-epoch target Dice to the histories).
    """
    _validate_domains(sources, target, config.num_classes)
    reads_before = target.label_reads
    bus = MessageBus()
    target_node = Node(NodeId(target.domain_id, "target"), target)
    source_nodes = [Node(NodeId(ds.domain_id, "source"), ds) for ds in sources]

    for node in source_nodes:
        node.received["unlabeled_images"] = bus.send(
            target_node.node_id, node.node_id, "unlabeled_images", target.images
        )

    eval_fn = None
    if oracle_mode and epoch_eval:
        eval_fn = lambda m: model_target_dice(m, target)

    def work(node):
        return _train_source(node, plan, config, eval_fn)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trained = list(pool.map(work, source_nodes))
    else:
        trained = [work(node) for node in source_nodes]

    adapted_models = []
    pretrained = {}
    for node, (pre, adapted) in zip(source_nodes, trained):
        pretrained[node.node_id.name] = pre
        blob = bus.send(node.node_id, target_node.node_id, "model_params",
                        serialize_params(adapted.model.state_dict()))
        target_node.received.setdefault("model_params", {})[node.node_id.name] = blob
        adapted_models.append(adapted)

    weights = compute_weights(adapted_models, target.image_stack(), plan.lambda_conf)
    return FederationResult(
        adapted=AdaptedModelSet(adapted_models),
        weights=weights,
        audit_log=bus.log,
        pretrained=pretrained,
        config=config,
        plan=plan,
        oracle_mode=oracle_mode,
        target_label_reads=target.label_reads - reads_before,
    )


def extend_run(result: FederationResult, new_source: DomainDataset,
               target: DomainDataset, workers: int = 1) -> FederationResult:
    """Fold a newly arrived source domain into an existing run.

    Trains only the new source; existing adapted models are reused untouched
    and only the weight vector is recomputed.
    """
    existing = set(result.adapted.source_ids())
    if new_source.domain_id in existing:
        raise ValueError(f"source '{new_source.domain_id}' already in the run")
    _validate_domains([new_source], target, result.config.num_classes)
    reads_before = target.label_reads

    extension_bus = MessageBus()
    extension_bus.log = result.audit_log  # one audit trail across the extension

    target_node = Node(NodeId(target.domain_id, "target"), target)
    node = Node(NodeId(new_source.domain_id, "source"), new_source)
    node.received["unlabeled_images"] = extension_bus.send(
        target_node.node_id, node.node_id, "unlabeled_images", target.images
    )
    pre, adapted = _train_source(node, result.plan, result.config, None)
    extension_bus.send(node.node_id, target_node.node_id, "model_params",
                       serialize_params(adapted.model.state_dict()))

    weights = add_source(result.adapted.models, result.weights, adapted,
                         target.image_stack())
    pretrained = dict(result.pretrained)
    pretrained[new_source.domain_id] = pre
    return FederationResult(
        adapted=AdaptedModelSet(list(result.adapted.models) + [adapted]),
        weights=weights,
        audit_log=extension_bus.log,
        pretrained=pretrained,
        config=result.config,
        plan=result.plan,
        oracle_mode=result.oracle_mode,
        target_label_reads=result.target_label_reads + (target.label_reads - reads_before),
    )
