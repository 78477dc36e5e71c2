"""Reference training schedules for the bundled datasets.

A recipe is a list of ``TrainConfig`` phases run back to back, each phase
starting from the previous phase's parameters. The schedules were picked by
pilot runs on one CPU core.
"""

from __future__ import annotations

import logging
from dataclasses import replace

from .cfm import ToyDataset, TrainConfig, train
from .errors import ConfigurationError
from .numerics import Rng

log = logging.getLogger(__name__)

# 2-D kinds: 128-wide MLP, minibatch-OT pairs, two phases at 1e-3 then a 1e-4 polish.
_TOY = [
    TrainConfig(batch_size=128, epochs=500, learning_rate=1e-3, coupling="minibatch-ot"),
    TrainConfig(batch_size=128, epochs=500, learning_rate=1e-3, coupling="minibatch-ot"),
    TrainConfig(batch_size=128, epochs=300, learning_rate=1e-4, coupling="minibatch-ot"),
]
# 16x16 images: the hidden width must exceed d = 256, otherwise the net cannot
# carry the identity-like part of x1 - x0 through its bottleneck. OT pairs
# reach a lower loss than independent ones (about 62 vs 82 at this budget).
_IMAGE = [
    TrainConfig(batch_size=128, epochs=600, learning_rate=1e-3, coupling="minibatch-ot", hidden=(512, 512, 512)),
    TrainConfig(batch_size=128, epochs=200, learning_rate=1e-4, coupling="minibatch-ot", hidden=(512, 512, 512)),
]

RECIPES = {
    "gauss-mixture-2d": _TOY,
    "two-moons-2d": _TOY,
    "checkerboard-2d": _TOY,
    "synth-gray-16x16": _IMAGE,
}


def recipe(kind, scale=1.0):
    """Phases for ``kind``; ``scale`` shrinks every phase's epoch count (for smoke runs)."""
    if kind not in RECIPES:
        raise ConfigurationError(f"no recipe for dataset {kind!r}")
    if not 0.0 < scale <= 1.0:
        raise ConfigurationError("scale must lie in (0, 1]")
    return [replace(p, epochs=max(1, round(p.epochs * scale))) for p in RECIPES[kind]]


def train_recipe(kind, seed, scale=1.0, log_records=None):
    """Run every phase of the recipe; per-epoch records are concatenated."""
    ds = ToyDataset(kind)
    root = Rng(seed)
    params = None
    records = log_records if log_records is not None else []
    offset = 0
    for i, phase in enumerate(recipe(kind, scale)):
        phase_records = []
        params = train(ds, replace(phase, seed=seed), rng=root.spawn(i), log_records=phase_records, init=params)
        for r in phase_records:
            r.epoch += offset
        offset += len(phase_records)
        records.extend(phase_records)
        log.info("%s phase %d done, loss %.5f", kind, i, phase_records[-1].mean_loss)
    return params
