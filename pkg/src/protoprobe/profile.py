"""Feature-layer activation profiles of class prototypes.

Neurons are ordered by the prototypes' mean activation; when class examples
are supplied, per-neuron quartiles of their activations are laid alongside.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import ModelState
from .modelio import FeatureExtractor, fingerprint

QUANTILE_METHOD = "linear"


def feature_activations(model: ModelState, inputs: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Row i is the feature vector of inputs[i]; shape (n, D)."""
    width = model.spec.feature_width
    if len(inputs) == 0:
        return np.empty((0, width), dtype=np.float32)
    g = FeatureExtractor(model)
    xs = np.stack([np.asarray(x, dtype=np.float32) for x in inputs])
    return np.concatenate([g(xs[i:i + batch_size]) for i in range(0, len(xs), batch_size)])


def quartiles(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quartiles of an empty sequence")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return float(q1), float(med), float(q3)


@dataclass
class ActivationProfile:
    class_index: int
    seeds: tuple[int, ...]
    sort_order: np.ndarray  # neuron ids, ascending mean prototype activation
    prototype_activations: np.ndarray = field(repr=False)  # (S, D) in sorted order
    train_q1: Optional[np.ndarray] = field(default=None, repr=False)
    train_median: Optional[np.ndarray] = field(default=None, repr=False)
    train_q3: Optional[np.ndarray] = field(default=None, repr=False)
    iqr_exceedance: Optional[float] = None
    model_fingerprint: str = ""

    @property
    def has_training_stats(self) -> bool:
        return self.train_q3 is not None


def build_profile(model: ModelState, k: int, prototypes, class_inputs=None) -> ActivationProfile:
    """Profile class `k` from its prototypes (one per seed) and optional class examples.

    ``iqr_exceedance`` is the fraction of the top decile of neurons (by sort
    order) where every seed's prototype activation reaches the class q3; it is
    only computed when examples are given.
    """
    prototypes = list(prototypes)
    if not prototypes:
        raise ValueError("need at least one prototype")
    acts = feature_activations(model, [p.input for p in prototypes]).astype(np.float64)
    order = np.argsort(acts.mean(axis=0), kind="stable")
    prof = ActivationProfile(k, tuple(p.seed for p in prototypes), order, acts[:, order],
                             model_fingerprint=fingerprint(model))
    if class_inputs is not None and len(class_inputs):
        train = feature_activations(model, list(class_inputs)).astype(np.float64)[:, order]
        q = np.quantile(train, [0.25, 0.5, 0.75], axis=0, method=QUANTILE_METHOD)
        prof.train_q1, prof.train_median, prof.train_q3 = q
        top = max(1, math.ceil(order.size / 10))
        hits = np.all(prof.prototype_activations[:, -top:] >= prof.train_q3[-top:], axis=0)
        prof.iqr_exceedance = float(hits.mean())
    return prof


def export_profile_csv(profile: ActivationProfile, destination) -> None:
    """One row per neuron in sorted order; IQR columns are blank without class data."""
    path = Path(destination)
    with path.open("w", newline="") as fh:
        fh.write(f"# model={profile.model_fingerprint} class={profile.class_index} "
                 f"seeds={','.join(map(str, profile.seeds))} quantile_method={QUANTILE_METHOD}"
                 f" sort_key=mean_prototype_activation\n")
        if profile.iqr_exceedance is not None:
            fh.write(f"# iqr_exceedance={profile.iqr_exceedance:.6f}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sorted_index", "original_neuron"]
                   + [f"proto_seed_{s}" for s in profile.seeds]
                   + ["train_q1", "train_median", "train_q3"])
        for i, neuron in enumerate(profile.sort_order):
            row = [i, int(neuron)] + [f"{v:.6f}" for v in profile.prototype_activations[:, i]]
            if profile.has_training_stats:
                row += [f"{profile.train_q1[i]:.6f}", f"{profile.train_median[i]:.6f}", f"{profile.train_q3[i]:.6f}"]
            else:
                row += ["", "", ""]
            w.writerow(row)
