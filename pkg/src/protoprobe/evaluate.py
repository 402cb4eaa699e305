"""Dataless evaluation: prototypes -> DeepFool adversaries -> metric report."""

from __future__ import annotations

from dataclasses import dataclass

from .adversary import AdversaryResult, AttackConfig, attack_set
from .engine import ModelState
from .metrics import DEFAULT_THRESHOLD_ADV, DEFAULT_THRESHOLD_G, MetricReport, compute_report
from .profile import feature_activations
from .prototypes import PrototypeSet, SynthConfig, synthesize_set


@dataclass
class Evaluation:
    report: MetricReport
    prototypes: PrototypeSet
    adversaries: list[AdversaryResult]


def report_from(model: ModelState, protos: PrototypeSet, adversaries: list[AdversaryResult],
                threshold_g: float = DEFAULT_THRESHOLD_G,
                threshold_adv: float = DEFAULT_THRESHOLD_ADV) -> MetricReport:
    cells = list(protos)
    feats = feature_activations(model, [p.input for p in cells])
    proto_features = {(p.class_index, p.seed): f for p, f in zip(cells, feats)}
    ok = [a for a in adversaries if a.success]
    adv_feats = feature_activations(model, [a.p_adv for a in ok])
    adv_features = {(a.class_index, a.seed): None for a in adversaries}
    adv_features.update({(a.class_index, a.seed): f for a, f in zip(ok, adv_feats)})
    return compute_report(proto_features, adv_features, protos.classes, protos.seeds, threshold_g, threshold_adv)


def evaluate(model: ModelState, seeds, synth: SynthConfig = SynthConfig(), attack: AttackConfig = AttackConfig(),
             threshold_g: float = DEFAULT_THRESHOLD_G, threshold_adv: float = DEFAULT_THRESHOLD_ADV) -> Evaluation:
    """Everything needed to judge `model` from its parameters alone."""
    protos = synthesize_set(model, seeds, synth)
    advs = attack_set(model, protos, attack)
    return Evaluation(report_from(model, protos, advs, threshold_g, threshold_adv), protos, advs)
