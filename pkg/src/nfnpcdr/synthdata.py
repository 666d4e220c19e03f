"""Synthetic two-domain rating data with planted multi-interest users.

Every user has a Dirichlet mixture over G interests; every item in each
domain belongs to one interest. A rating is ``1 + 4 * weight`` of the user's
mixture on the item's interest plus Gaussian noise, rounded half up and
clamped to [1, 5]. Both domains share the user's mixture, which is what a
cross-domain model can transfer. Random draws use xorshift64* seeded through
splitmix64 (see :mod:`nfnpcdr.kernels`) so files are byte-identical across
platforms for a given seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .data import Interaction, format_ratings, preprocess


@dataclass(frozen=True)
class SynthConfig:
    n_interests: int = 3
    n_users: int = 500
    n_items: int = 300
    overlap: float = 0.8
    n_interactions: int = 20
    noise: float = 0.3
    seed: int = 0
    concentration: float = 0.5

    def __post_init__(self):
        if self.n_interests < 1:
            raise ValueError("n_interests must be >= 1")
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("n_users and n_items must be >= 1")
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in (0, 1], got {self.overlap}")
        if not 1 <= self.n_interactions <= self.n_items:
            raise ValueError("n_interactions must lie in [1, n_items]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def n_overlap(self):
        return int(np.floor(self.overlap * self.n_users + 0.5))

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthData:
    source: list
    target: list
    mixture: np.ndarray
    item_interest: np.ndarray

    def truth(self):
        return {
            "user": {f"u{u:05d}": [float(x) for x in row] for u, row in enumerate(self.mixture)},
            "item_interest": {
                "source": {f"s{j:04d}": int(g) for j, g in enumerate(self.item_interest[0])},
                "target": {f"t{j:04d}": int(g) for j, g in enumerate(self.item_interest[1])},
            },
        }


def generate(config):
    """Draw a dataset; the first ``n_overlap`` users exist in both domains."""
    item_interest, mixture, items, ratings = kernels.synth_draws(
        config.seed, config.n_users, config.n_overlap, config.n_items, config.n_interactions,
        config.n_interests, config.concentration, config.noise)
    n = config.n_interactions
    domains = ([], [])
    for u in range(config.n_users):
        uid = f"u{u:05d}"
        for dom, prefix in ((0, "s"), (1, "t")):
            if dom == 1 and u >= config.n_overlap:
                continue
            for k in range(n):
                domains[dom].append(Interaction(uid, f"{prefix}{items[dom, u, k]:04d}",
                                                int(ratings[dom, u, k]), k))
    return SynthData(domains[0], domains[1], np.asarray(mixture), np.asarray(item_interest))


def write_synth(out_dir, data):
    os.makedirs(out_dir, exist_ok=True)
    for name, rows in (("source.csv", data.source), ("target.csv", data.target)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_ratings(rows))
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data.truth(), fh, sort_keys=True)
        fh.write("\n")


def global_mean_mae(train_ratings, test_ratings):
    """MAE of predicting the training mean rating for every test pair."""
    train_ratings = np.asarray(train_ratings, dtype=np.float64)
    test_ratings = np.asarray(test_ratings, dtype=np.float64)
    if train_ratings.size == 0 or test_ratings.size == 0:
        raise ValueError("need training and test ratings")
    return float(np.mean(np.abs(test_ratings - train_ratings.mean())))


def split_mae(pre):
    """Global-mean MAE on a preprocessed split: mean over training users' target ratings."""
    train, test = set(pre.train), set(pre.test)
    tr = [x.rating for x in pre.target.interactions if x.user_id in train]
    te = [x.rating for x in pre.target.interactions if x.user_id in test]
    return global_mean_mae(tr, te)


def oracle_mae(config, alpha=0.2, split_seed=None, data=None):
    """Global-mean baseline on the cold-start split of ``config``'s data."""
    data = generate(config) if data is None else data
    pre = preprocess(data.source, data.target, alpha, config.seed if split_seed is None else split_seed)
    return split_mae(pre)
