"""The full federated pipeline: per-source adaptation on separate nodes,
then confidence-weighted aggregation at the target node.

Every cross-node transfer goes through an audited bus. Target images are
broadcast to source nodes; adapted model parameters flow back; no image
data ever moves between two sources. The corrupted variant swaps one source
for a signal-dead scanner and shows the confidence rule down-weighting it
while uniform averaging and majority vote take the damage.
"""

from fedseg.benchmark import (default_net_config, default_plan,
                              make_benchmark_domains)
from fedseg.ensembling import aggregate, average_vote, popular_vote
from fedseg.evaluation import dice, model_target_dice
from fedseg.federation import audit_check, run_msuda

config = default_net_config()

for corrupted in (False, True):
    label = "corrupted second source" if corrupted else "two healthy sources"
    print(f"=== {label} ===")
    sources, target = make_benchmark_domains(seed=0, corrupted=corrupted)
    result = run_msuda(sources, target, default_plan(seed=0), config,
                       oracle_mode=True, workers=2)

    print("audit:", "pass" if audit_check(result.audit_log).ok else "FAIL")
    for message in result.audit_log.records:
        print(f"  {message.sender.name} -> {message.receiver.name}: "
              f"{message.payload_kind} ({message.byte_size} bytes)")

    models = result.adapted.models
    for am in models:
        print(f"  {am.source_id}: weight {result.weights.weights[models.index(am)]:.3f} "
              f"target Dice {model_target_dice(am.model, target):.3f}")

    images = target.image_stack()
    truth = target.mask_stack()
    print(f"  weighted ensemble : {dice(aggregate(models, result.weights, images).mask, truth):.3f}")
    print(f"  uniform average   : {dice(average_vote(models, images, seed=0).mask, truth):.3f}")
    print(f"  majority vote     : {dice(popular_vote(models, images, seed=0), truth):.3f}")
    print()
