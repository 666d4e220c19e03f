"""Rating logs, the filtering protocol, overlap/splits and per-user tasks."""

from __future__ import annotations

import io
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Base class for data-protocol failures."""


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class RatingRangeError(ParseError):
    pass


class DegenerateDatasetError(DataError):
    pass


class ProtocolError(DataError):
    pass


class TaskError(DataError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: int
    timestamp: int
    line: int | None = field(default=None, compare=False, repr=False)


def parse_ratings(stream, delimiter=",", path=None):
    """Parse ``user_id,item_id,rating,timestamp`` records.

    ``stream`` may be bytes, str, or a text/binary file object. Blank lines
    are skipped; anything else malformed raises :class:`ParseError` with the
    1-based line number.
    """
    if isinstance(stream, (bytes, bytearray)):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    out = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split(delimiter)
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno, path)
        user, item, rating, ts = (f.strip() for f in fields)
        if not user or not item:
            raise ParseError("empty user or item id", lineno, path)
        try:
            rating_i = int(rating)
            ts_i = int(ts)
        except ValueError:
            raise ParseError(f"non-integer rating/timestamp {rating!r}, {ts!r}", lineno, path) from None
        if not 1 <= rating_i <= 5:
            raise RatingRangeError(f"rating {rating_i} outside [1, 5]", lineno, path)
        if ts_i < 0:
            raise ParseError(f"negative timestamp {ts_i}", lineno, path)
        out.append(Interaction(user, item, rating_i, ts_i, lineno))
    return out


def read_ratings(path, delimiter=","):
    with open(path, "rb") as fh:
        return parse_ratings(fh, delimiter, path=str(path))


def format_ratings(interactions):
    return "".join(f"{x.user_id},{x.item_id},{x.rating},{x.timestamp}\n" for x in interactions)


def write_ratings(path, interactions):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_ratings(interactions))


class DomainDataset:
    """Interactions of one domain plus dense user/item indices.

    Indices are assigned in sorted-id order, so they depend only on the set
    of ids present.
    """

    def __init__(self, domain, interactions):
        if domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        self.domain = domain
        self.interactions = list(interactions)
        self.user_index = {u: k for k, u in enumerate(sorted({x.user_id for x in self.interactions}))}
        self.item_index = {i: k for k, i in enumerate(sorted({x.item_id for x in self.interactions}))}
        self._by_user = None

    def __len__(self):
        return len(self.interactions)

    def __repr__(self):
        return (f"DomainDataset({self.domain}, users={len(self.user_index)}, "
                f"items={len(self.item_index)}, ratings={len(self.interactions)})")

    @property
    def users(self):
        return set(self.user_index)

    def by_user(self):
        if self._by_user is None:
            groups = {}
            for x in self.interactions:
                groups.setdefault(x.user_id, []).append(x)
            self._by_user = groups
        return self._by_user

    def with_interactions(self, interactions):
        return DomainDataset(self.domain, interactions)


def _fixpoint(interactions, min_interactions):
    kept = list(interactions)
    while True:
        users = Counter(x.user_id for x in kept)
        items = Counter(x.item_id for x in kept)
        nxt = [x for x in kept
               if users[x.user_id] >= min_interactions and items[x.item_id] >= min_interactions]
        if len(nxt) == len(kept):
            return kept
        kept = nxt


def filter_pair(source, target, min_interactions=5, source_rating_floor=4):
    """Apply the dataset filtering protocol to a (source, target) pair.

    Users and items with fewer than ``min_interactions`` ratings are removed
    from each domain repeatedly until nothing changes. Afterwards, and only
    once, source ratings below ``source_rating_floor`` are dropped.
    """
    src = _fixpoint(source.interactions, min_interactions)
    tgt = _fixpoint(target.interactions, min_interactions)
    src = [x for x in src if x.rating >= source_rating_floor]
    if not src or not tgt:
        empty = "source" if not src else "target"
        raise DegenerateDatasetError(f"{empty} domain is empty after filtering")
    return source.with_interactions(src), target.with_interactions(tgt)


def compute_overlap(source, target):
    """Return ``(overlap, source_only)`` as sorted user-id lists."""
    su, tu = source.users, target.users
    overlap = sorted(su & tu)
    if not overlap:
        raise ProtocolError("no user appears in both domains; training is impossible")
    return overlap, sorted(su - tu)


@dataclass(frozen=True)
class SplitConfig:
    alpha: float = 0.2
    support_length: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.support_length < 1:
            raise ValueError(f"support_length must be >= 1, got {self.support_length}")


def n_test_users(n, alpha):
    # round first so 0.7 * 10 counts as 7, not 8
    return math.ceil(round(alpha * n, 9))


def split_users(overlap, config):
    """Seeded shuffle of the overlap; the first ceil(alpha*n) become test users."""
    users = sorted(overlap)
    if not users:
        raise ProtocolError("cannot split an empty overlap")
    n_test = n_test_users(len(users), config.alpha)
    if n_test == 0 or n_test == len(users):
        raise ProtocolError(f"alpha={config.alpha} over {len(users)} users leaves an empty partition")
    perm = np.random.default_rng(config.seed).permutation(len(users))
    shuffled = [users[k] for k in perm]
    return sorted(shuffled[n_test:]), sorted(shuffled[:n_test])


@dataclass(frozen=True)
class Task:
    user_id: str
    support: tuple
    query: tuple

    def __post_init__(self):
        if not self.support:
            raise TaskError(f"user {self.user_id} has an empty support set")


def _chrono(x):
    return (x.timestamp, x.item_id)


def build_task(user, source, target, support_length, require_query=True):
    """Support: the user's latest ``support_length`` source ratings, oldest first.

    Ties on timestamp are ordered by item id. The query holds every target
    rating of the user in the same chronological order.
    """
    support = sorted(source.by_user().get(user, ()), key=_chrono)
    if not support:
        raise TaskError(f"user {user} has no source-domain interactions")
    support = support[-support_length:]
    query = sorted(target.by_user().get(user, ()), key=_chrono) if target is not None else []
    if require_query and not query:
        raise TaskError(f"user {user} has no target-domain interactions")
    return Task(user, tuple(support), tuple(query))


# -- preprocessed directory -----------------------------------------------------


@dataclass
class Preprocessed:
    source: DomainDataset
    target: DomainDataset
    overlap: list
    train: list
    test: list
    alpha: float
    seed: int

    def counts(self):
        """Table-II style statistics."""
        return {
            "source": {"users": len(self.source.user_index), "items": len(self.source.item_index),
                       "ratings": len(self.source)},
            "target": {"users": len(self.target.user_index), "items": len(self.target.item_index),
                       "ratings": len(self.target)},
            "overlap": len(self.overlap),
            "train_users": len(self.train),
            "test_users": len(self.test),
        }


def preprocess(source_interactions, target_interactions, alpha, seed, min_interactions=5,
               source_rating_floor=4):
    source = DomainDataset("source", source_interactions)
    target = DomainDataset("target", target_interactions)
    source, target = filter_pair(source, target, min_interactions, source_rating_floor)
    overlap, _ = compute_overlap(source, target)
    train, test = split_users(overlap, SplitConfig(alpha=alpha, seed=seed))
    return Preprocessed(source, target, overlap, train, test, alpha, seed)


def write_preprocessed(out_dir, pre):
    os.makedirs(out_dir, exist_ok=True)
    write_ratings(os.path.join(out_dir, "source.csv"), pre.source.interactions)
    write_ratings(os.path.join(out_dir, "target.csv"), pre.target.interactions)
    with open(os.path.join(out_dir, "overlap.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(u + "\n" for u in pre.overlap))
    split = {"alpha": pre.alpha, "seed": pre.seed, "train": pre.train, "test": pre.test}
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(split, fh, indent=1)
        fh.write("\n")


def load_preprocessed(data_dir):
    source = DomainDataset("source", read_ratings(os.path.join(data_dir, "source.csv")))
    target = DomainDataset("target", read_ratings(os.path.join(data_dir, "target.csv")))
    with open(os.path.join(data_dir, "overlap.txt"), encoding="utf-8") as fh:
        overlap = [line.strip() for line in fh if line.strip()]
    path = os.path.join(data_dir, "split.json")
    try:
        with open(path, encoding="utf-8") as fh:
            split = json.load(fh)
        return Preprocessed(source, target, overlap, list(split["train"]), list(split["test"]),
                            float(split["alpha"]), int(split["seed"]))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"malformed split file: {exc}", path=path) from exc
