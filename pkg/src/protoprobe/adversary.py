"""Multiclass L2 DeepFool against prototype inputs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ModelState, argmax, logit_jacobian, run
from .modelio import fingerprint
from .prototypes import PrototypeSet

log = logging.getLogger(__name__)

# added to each linearised step so the iterate lands past the boundary, not on it
_STEP_SLACK = 1e-4


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = 50
    overshoot: float = 0.02
    clip_to_unit_box: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.overshoot >= 0:
            raise ValueError(f"overshoot must be >= 0, got {self.overshoot}")


@dataclass(frozen=True)
class AdversaryResult:
    class_index: int
    seed: int
    delta: np.ndarray = field(repr=False)  # (1 + overshoot) * accumulated step
    p_adv: np.ndarray = field(repr=False)  # clip(p + delta) when clipping
    iterations: int
    original_label: int
    adversarial_label: int
    success: bool

    @property
    def l2_norm(self) -> float:
        d = self.delta.astype(np.float64).ravel()
        return math.sqrt(float(d @ d))


def deepfool(model: ModelState, p: np.ndarray, config: AttackConfig = AttackConfig(),
             class_index: int = -1, seed: int = -1) -> AdversaryResult:
    """Smallest misclassifying perturbation of `p` found by iterated linearisation.

    At each iterate the logit differences to every rival class are linearised
    and the step to the nearest linear boundary is accumulated. Stops when the
    predicted label of the (clipped, float32) iterate differs from the label of
    `p`; if that never happens within the budget the partial delta is returned
    with ``success=False``.
    """
    k_total = model.spec.classes
    if k_total < 2:
        raise ValueError("DeepFool needs at least two classes; no adversary exists for K=1")
    p = np.asarray(p, dtype=np.float32)
    if p.shape != model.spec.input_shape:
        raise ValueError(f"input shape {p.shape} != model input {model.spec.input_shape}")
    p64 = p.astype(np.float64)
    label = argmax(run(model, p).logits[0])
    scale = 1.0 + config.overshoot
    r_tot = np.zeros_like(p64)
    x = p
    current = label
    iterations = 0
    while iterations < config.max_iterations:
        logits, jac = logit_jacobian(model, x)
        best, best_w = math.inf, None
        for j in range(k_total):
            if j == label:
                continue
            w = (jac[j] - jac[label]).ravel()
            wn = math.sqrt(float(w @ w))
            if wn == 0.0:
                continue
            dist = abs(logits[j] - logits[label]) / wn
            if dist < best:
                best, best_w, best_n = dist, w, wn
        if best_w is None:
            log.warning("DeepFool: all rival gradients vanish; stopping")
            break
        r_tot += ((best + _STEP_SLACK) * best_w / best_n).reshape(p.shape)
        cand = p64 + scale * r_tot
        if config.clip_to_unit_box:
            cand = np.clip(cand, 0.0, 1.0)
        x = cand.astype(np.float32)
        iterations += 1
        current = argmax(run(model, x).logits[0])
        if current != label:
            break
    delta = (scale * r_tot).astype(np.float32)
    x.setflags(write=False)
    delta.setflags(write=False)
    return AdversaryResult(class_index, seed, delta, x, iterations, label, current, current != label)


def affine_minimal_perturbation(weights, bias, x, current_class: int) -> tuple[np.ndarray, float]:
    """Closed-form smallest L2 step from `x` onto the nearest rival boundary of an affine classifier.

    For rival j: ``delta_j = |s_c - s_j| / ||w_j - w_c||^2 * (w_j - w_c)``; the
    shortest one is returned.
    """
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    s = w @ x + b
    c = int(current_class)
    best, best_norm = None, math.inf
    for j in range(w.shape[0]):
        if j == c:
            continue
        diff = w[j] - w[c]
        dd = float(diff @ diff)
        if dd == 0.0:
            continue
        delta = abs(s[c] - s[j]) / dd * diff
        norm = abs(s[c] - s[j]) / math.sqrt(dd)
        if norm < best_norm:
            best, best_norm = delta, norm
    if best is None:
        raise ValueError("degenerate boundary: every rival has the same weight row as the current class")
    return best, float(best_norm)


def attack_set(model: ModelState, protos: PrototypeSet, config: AttackConfig = AttackConfig()) -> list[AdversaryResult]:
    """DeepFool on every prototype, in the set's (seed, class) order.

    Individual failures are returned flagged, not raised.
    """
    fp = fingerprint(model)
    if protos.model_fingerprint != fp:
        raise ValueError(f"prototypes were made for model {protos.model_fingerprint}, not {fp}")
    results = [deepfool(model, p.input, config, p.class_index, p.seed) for p in protos]
    failed = sum(not r.success for r in results)
    if failed:
        log.warning("DeepFool failed on %d of %d prototypes", failed, len(results))
    return results


def save_adversaries(results, directory) -> Path:
    """Text table plus one raw little-endian float32 file per adversarial input."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["class\tseed\tsuccess\titerations\toriginal_label\tadversarial_label\tdelta_l2\tfile"]
    for r in results:
        name = f"adv_c{r.class_index}_s{r.seed}.f32"
        (d / name).write_bytes(r.p_adv.astype("<f4").tobytes())
        lines.append(f"{r.class_index}\t{r.seed}\t{str(r.success).lower()}\t{r.iterations}\t"
                     f"{r.original_label}\t{r.adversarial_label}\t{r.l2_norm:.6f}\t{name}")
    path = d / "adversaries.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
