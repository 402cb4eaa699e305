"""Growing-data training study: checkpoint metrics against held-out accuracy."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..adversary import AttackConfig
from ..engine import LayerSpec, NetworkSpec, init_model
from ..evaluate import evaluate
from ..metrics import pearson
from ..modelio import save_model
from ..prototypes import SynthConfig
from .data import Dataset, gen_synthetic_dataset, stratified_fraction
from .train import accuracy, train

log = logging.getLogger(__name__)

TABLE_FRACTIONS = (0.25, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0)


def reference_spec(classes: int = 8, input_shape=(1, 32, 32)) -> NetworkSpec:
    """Three conv/relu blocks, global average pooling, one dense head (64 features)."""
    c = input_shape[0]
    layers = (
        LayerSpec.conv2d(c, 16, 3, stride=2, padding=1), LayerSpec("relu"),
        LayerSpec.conv2d(16, 32, 3, stride=2, padding=1), LayerSpec("relu"),
        LayerSpec.conv2d(32, 64, 3, stride=1, padding=1), LayerSpec("relu"),
        LayerSpec("global_avg_pool"),
        LayerSpec.dense(64, classes),
    )
    return NetworkSpec(layers, tuple(input_shape), classes, feature_index=7)


@dataclass(frozen=True)
class StudySchedule:
    fractions: tuple[float, ...] = TABLE_FRACTIONS
    epochs_per_stage: int = 30
    lr_first_stage: float = 0.1
    lr_later_stages: float = 0.05
    lr_min: float = 0.001
    batch_size: int = 64
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr:
            raise ValueError("schedule needs at least one fraction")
        if any(not 0 < f <= 1 for f in fr):
            raise ValueError(f"fractions must lie in (0, 1]: {fr}")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError(f"fractions must be strictly increasing: {fr}")
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_stage and batch_size must be positive")
        if not (self.lr_first_stage > 0 and self.lr_later_stages > 0 and self.lr_min >= 0):
            raise ValueError("learning rates must be positive")
        if not (0 <= self.momentum < 1 and self.weight_decay >= 0):
            raise ValueError("momentum must lie in [0, 1) and weight_decay must be >= 0")


# plain SGD does not memorise the reference task within the stage budget
REFERENCE_SCHEDULE = StudySchedule(momentum=0.9, weight_decay=5e-4)

# desk reference task: 8 shape classes, 200 training and 50 held-out images per class
REFERENCE_DIFFICULTY = 0.9
REFERENCE_PER_CLASS = 200
REFERENCE_TEST_PER_CLASS = 50
HELD_OUT_SEED_OFFSET = 1_000_003


def reference_datasets(seed: int = 0, classes: int = 8, per_class: int = REFERENCE_PER_CLASS,
                       test_per_class: int = REFERENCE_TEST_PER_CLASS, shape=(1, 32, 32),
                       difficulty: float = REFERENCE_DIFFICULTY) -> tuple[Dataset, Dataset]:
    """(train, test) synthetic sets; the test set comes from a disjoint seed stream."""
    train_set = gen_synthetic_dataset(classes, per_class, shape, difficulty, seed)
    test_set = gen_synthetic_dataset(classes, test_per_class, shape, difficulty, seed + HELD_OUT_SEED_OFFSET)
    return train_set, test_set


@dataclass(frozen=True)
class CheckpointRecord:
    fraction: float
    cumulative_epochs: int
    train_accuracy: float
    test_accuracy: float
    m_g: float
    m_g_min: float
    m_g_max: float
    m_adv: float
    m_adv_min: float
    m_adv_max: float
    attack_failures: int


@dataclass
class CorrelationStudy:
    records: list[CheckpointRecord]
    pearson_g: Optional[float]
    pearson_adv: Optional[float]
    config: dict = field(default_factory=dict)

    @property
    def m_g_increased(self) -> bool:
        return self.records[-1].m_g > self.records[0].m_g


def _safe_pearson(xs, ys):
    try:
        return pearson(xs, ys)
    except ValueError:
        return None


def run_study(spec: NetworkSpec, train_set: Dataset, test_set: Dataset,
              schedule: StudySchedule = StudySchedule(), seeds: Sequence[int] = (0, 1, 2, 3, 4),
              synth: SynthConfig = SynthConfig(), attack: AttackConfig = AttackConfig(),
              seed: int = 0, checkpoint_dir=None) -> CorrelationStudy:
    """Train one model through the growing-data schedule, measuring at each stage.

    The same model keeps training as its stratified subset grows; after every
    stage the held-out accuracy and the dataless metrics are recorded. The
    test set is used for accuracy only.
    """
    if train_set.classes != spec.classes or test_set.classes != spec.classes:
        raise ValueError("dataset class counts must match the model")
    model = init_model(spec, seed)
    records = []
    epochs = 0
    for stage, frac in enumerate(schedule.fractions):
        ctx = f"stage {stage} (fraction {frac}): "
        t0 = time.time()
        subset = stratified_fraction(train_set, frac, seed)
        lr = schedule.lr_first_stage if stage == 0 else schedule.lr_later_stages
        try:
            model, stats = train(model, subset, schedule.epochs_per_stage, lr, schedule.lr_min,
                                 schedule.batch_size, seed=seed * 1000 + stage, momentum=schedule.momentum,
                                 weight_decay=schedule.weight_decay, context=ctx)
        except Exception as exc:
            raise type(exc)(f"{ctx}{exc}") from exc
        epochs += schedule.epochs_per_stage
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(model, Path(checkpoint_dir) / f"stage{stage}_f{frac:g}.ppm")
        test_acc = accuracy(model, test_set)
        try:
            ev = evaluate(model, seeds, synth, attack)
        except Exception as exc:
            raise type(exc)(f"{ctx}{exc}") from exc
        rep = ev.report
        rec = CheckpointRecord(frac, epochs, stats[-1].train_accuracy, test_acc,
                               rep.m_g, *rep.m_g_spread, rep.m_adv, *rep.m_adv_spread,
                               rep.excluded_attack_failures)
        records.append(rec)
        log.info("%strain=%.3f test=%.3f M_g=%.4f M_adv=%.4f (%.0fs)", ctx, rec.train_accuracy,
                 test_acc, rep.m_g, rep.m_adv, time.time() - t0)
    accs = [r.test_accuracy for r in records]
    config = {"schedule": asdict(schedule), "prototype_seeds": list(seeds), "synth": asdict(synth),
              "attack": asdict(attack), "model_seed": seed}
    return CorrelationStudy(records, _safe_pearson([r.m_g for r in records], accs),
                            _safe_pearson([r.m_adv for r in records], accs), config)


STUDY_COLUMNS = ("fraction", "epochs", "train_acc", "test_acc", "m_g", "m_g_min", "m_g_max",
                 "m_adv", "m_adv_min", "m_adv_max")


def format_study_csv(study: CorrelationStudy, header: Optional[dict] = None, timestamp: Optional[str] = None) -> str:
    lines = ["# protoprobe study"]
    if timestamp is not None:
        lines.append(f"# generated={timestamp}")
    for key, value in {**study.config, **(header or {})}.items():
        lines.append(f"# {key}={value}")
    lines.append(",".join(STUDY_COLUMNS))
    for r in study.records:
        lines.append(f"{r.fraction:g},{r.cumulative_epochs},{r.train_accuracy:.6f},{r.test_accuracy:.6f},"
                     f"{r.m_g:.6f},{r.m_g_min:.6f},{r.m_g_max:.6f},"
                     f"{r.m_adv:.6f},{r.m_adv_min:.6f},{r.m_adv_max:.6f}")

    def fmt(v):
        return "nan" if v is None else f"{v:.6f}"

    lines.append(f"# pearson_g={fmt(study.pearson_g)} pearson_adv={fmt(study.pearson_adv)}")
    return "\n".join(lines) + "\n"
