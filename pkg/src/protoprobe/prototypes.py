"""Class prototypes synthesised from model parameters alone.

Each prototype starts as seeded uniform noise in [0, 1]^N and descends the
cross-entropy against a one-hot target with fixed-length (normalised-gradient)
steps until the target class probability reaches the confidence goal.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .engine import ModelState, NumericError, loss_and_input_gradient
from .modelio import fingerprint

log = logging.getLogger(__name__)

VANISH_NORM = 1e-12

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"
VANISHED = "vanished_gradient"


class VanishedGradient(ArithmeticError):
    """Gradient norm fell below the division guard."""


@dataclass(frozen=True)
class SynthConfig:
    learning_rate: float = 0.1
    max_iterations: int = 1000
    confidence_target: float = 0.999
    clip_to_unit_box: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0 < self.confidence_target < 1:
            raise ValueError(f"confidence_target must lie in (0, 1), got {self.confidence_target}")


@dataclass(frozen=True)
class Prototype:
    class_index: int
    seed: int
    input: np.ndarray = field(repr=False)
    target: np.ndarray = field(repr=False)
    trace: tuple[float, ...] = field(repr=False)
    final_confidence: float
    iterations: int
    status: str

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def one_hot(k: int, classes: int) -> np.ndarray:
    if not 0 <= k < classes:
        raise ValueError(f"class index {k} outside [0, {classes})")
    y = np.zeros(classes, dtype=np.float32)
    y[k] = 1.0
    return y


def synth_step(p: np.ndarray, gradient: np.ndarray, lr: float, clip: bool = False) -> np.ndarray:
    """One update ``p - lr * g / ||g||``, optionally clamped to [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    norm = math.sqrt(float(np.dot(g.ravel(), g.ravel())))
    if norm < VANISH_NORM:
        raise VanishedGradient(f"gradient norm {norm:.3g} below {VANISH_NORM}")
    out = p - lr * (g / norm)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def initial_input(shape, class_index: int, seed: int) -> np.ndarray:
    """Seeded uniform draw on [0, 1]; depends only on (shape, class, seed)."""
    rng = np.random.default_rng([seed, class_index])
    return rng.random(shape).astype(np.float32)


def _synthesize_cells(model: ModelState, cells: Sequence[tuple[int, int]], config: SynthConfig):
    """Run synthesis for several (class, seed) cells in lock-step batches.

    Every cell is evaluated with its own per-sample kernels, so a cell's result
    is bit-identical to running it alone.
    """
    classes = model.spec.classes
    shape = model.spec.input_shape
    n = len(cells)
    ps = np.stack([initial_input(shape, k, s) for k, s in cells]) if n else np.empty((0, *shape))
    targets = np.stack([one_hot(k, classes) for k, _ in cells]) if n else np.empty((0, classes))
    traces = [[] for _ in range(n)]
    conf = np.zeros(n)
    status = [MAX_ITERATIONS] * n
    steps = [0] * n
    active = list(range(n))
    for _ in range(config.max_iterations):
        if not active:
            break
        idx = np.asarray(active)
        loss, probs, grads = loss_and_input_gradient(model, ps[idx], targets[idx])
        still = []
        for row, i in enumerate(active):
            k = cells[i][0]
            traces[i].append(float(loss[row]))
            conf[i] = probs[row, k]
            if conf[i] >= config.confidence_target:
                status[i] = CONVERGED
                continue
            try:
                ps[i] = synth_step(ps[i], grads[row], config.learning_rate, config.clip_to_unit_box)
            except VanishedGradient:
                status[i] = VANISHED
                continue
            steps[i] += 1
            still.append(i)
        active = still
    if active:
        # iteration budget spent: report the confidence of the final iterate
        idx = np.asarray(active)
        _, probs, _ = loss_and_input_gradient(model, ps[idx], targets[idx])
        for row, i in enumerate(active):
            conf[i] = probs[row, cells[i][0]]

    out = []
    for i, (k, s) in enumerate(cells):
        if not all(math.isfinite(v) for v in traces[i]):
            raise NumericError(f"class {k}, seed {s}: non-finite loss")
        if status[i] == VANISHED:
            log.warning("class %d seed %d: gradient vanished at confidence %.4f", k, s, conf[i])
        p = ps[i].copy()
        p.setflags(write=False)
        out.append(Prototype(k, s, p, targets[i], tuple(traces[i]), float(conf[i]), steps[i], status[i]))
    return out


def synthesize_prototype(model: ModelState, k: int, config: SynthConfig, seed: int = 0) -> Prototype:
    """Prototype input for class `k`; deterministic in (model, k, seed, config)."""
    one_hot(k, model.spec.classes)
    return _synthesize_cells(model, [(k, seed)], config)[0]


@dataclass(frozen=True)
class PrototypeSet:
    """Prototypes on a class x seed grid, tied to one model by fingerprint."""

    classes: int
    seeds: tuple[int, ...]
    model_fingerprint: str
    grid: dict = field(repr=False)  # (class, seed) -> Prototype

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("a prototype set needs at least one seed")
        expected = {(k, s) for k in range(self.classes) for s in self.seeds}
        if set(self.grid) != expected:
            raise ValueError("grid must hold exactly one prototype per (class, seed)")

    def __len__(self):
        return len(self.grid)

    def __iter__(self):
        for s in self.seeds:
            for k in range(self.classes):
                yield self.grid[(k, s)]

    def for_seed(self, seed: int) -> list[Prototype]:
        return [self.grid[(k, seed)] for k in range(self.classes)]

    def for_class(self, k: int) -> list[Prototype]:
        return [self.grid[(k, s)] for s in self.seeds]


def synthesize_set(model: ModelState, seeds: Iterable[int], config: SynthConfig,
                   batched: bool = True) -> PrototypeSet:
    """Full class x seed grid. ``batched=False`` runs each cell on its own."""
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("seed list is empty")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in {seeds}")
    cells = [(k, s) for s in seeds for k in range(model.spec.classes)]
    try:
        if batched:
            protos = _synthesize_cells(model, cells, config)
        else:
            protos = [synthesize_prototype(model, k, config, s) for k, s in cells]
    except NumericError as exc:
        raise NumericError(f"prototype synthesis failed: {exc}") from None
    grid = {(p.class_index, p.seed): p for p in protos}
    return PrototypeSet(model.spec.classes, seeds, fingerprint(model), grid)


# --------------------------------------------------------------------------
# directory serialisation


def _proto_file(k, s):
    return f"proto_c{k}_s{s}.f32"


def save_prototype_set(protos: PrototypeSet, directory, input_shape) -> Path:
    """One raw little-endian float32 file per prototype plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [
        "# protoprobe prototype set",
        f"# model={protos.model_fingerprint} classes={protos.classes} "
        f"seeds={','.join(map(str, protos.seeds))} input={'x'.join(map(str, input_shape))}",
        "class\tseed\tstatus\titerations\tfinal_confidence\tfile",
    ]
    for p in protos:
        name = _proto_file(p.class_index, p.seed)
        (d / name).write_bytes(p.input.astype("<f4").tobytes())
        lines.append(f"{p.class_index}\t{p.seed}\t{p.status}\t{p.iterations}\t{p.final_confidence:.6f}\t{name}")
    path = d / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_prototype_set(directory) -> PrototypeSet:
    """Inverse of :func:`save_prototype_set`; loss traces are not stored and come back empty."""
    d = Path(directory)
    lines = (d / "manifest.txt").read_text().splitlines()
    meta = dict(kv.split("=", 1) for kv in lines[1].lstrip("# ").split())
    classes = int(meta["classes"])
    seeds = tuple(int(s) for s in meta["seeds"].split(","))
    shape = tuple(int(s) for s in meta["input"].split("x"))
    grid = {}
    for line in lines[3:]:
        k, s, status, iters, conf, name = line.split("\t")
        k, s = int(k), int(s)
        arr = np.frombuffer((d / name).read_bytes(), dtype="<f4").astype(np.float32).reshape(shape)
        arr.setflags(write=False)
        grid[(k, s)] = Prototype(k, s, arr, one_hot(k, classes), (), float(conf), int(iters), status)
    return PrototypeSet(classes, seeds, meta["model"], grid)
