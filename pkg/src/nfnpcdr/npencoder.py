"""Embeddings, the interaction-set encoder and the Gaussian latent heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkernel import MLP, MLPSpec, ContractError, DimensionError, ParameterBlock, Tensor
from .numkernel import tensor as T

LOG_2PI = math.log(2.0 * math.pi)

# sigma-head preactivations are clamped here so 0.1 < sigma < 1.0 survives
# float rounding; sigmoid(+-30) is still 1e-13 away from its limits
SIGMA_PREACT_BOUND = 30.0


class UnknownIdError(KeyError):
    pass


@dataclass
class IdMaps:
    """String id -> dense row index for users and each domain's items."""

    users: dict
    source_items: dict
    target_items: dict

    @classmethod
    def from_datasets(cls, source, target):
        users = sorted(set(source.user_index) | set(target.user_index))
        return cls({u: k for k, u in enumerate(users)},
                   dict(source.item_index), dict(target.item_index))

    def to_json(self):
        return {"users": sorted(self.users, key=self.users.get),
                "source_items": sorted(self.source_items, key=self.source_items.get),
                "target_items": sorted(self.target_items, key=self.target_items.get)}

    @classmethod
    def from_json(cls, obj):
        return cls(*({k: i for i, k in enumerate(obj[name])}
                     for name in ("users", "source_items", "target_items")))

    def lookup(self, kind, key):
        table = getattr(self, kind)
        try:
            return table[key]
        except KeyError:
            raise UnknownIdError(f"unknown {kind[:-1].replace('_', ' ')} id {key!r}") from None


class EmbeddingStore:
    """User, source-item and target-item embedding tables (N(0, 0.1) init)."""

    def __init__(self, id_maps, d1, rng):
        if d1 < 1:
            raise ValueError(f"embedding dimension must be >= 1, got {d1}")
        self.id_maps = id_maps
        self.d1 = d1
        self.user = ParameterBlock("embed.user", rng.normal(0.0, 0.1, (len(id_maps.users), d1)))
        self.source_item = ParameterBlock(
            "embed.source_item", rng.normal(0.0, 0.1, (len(id_maps.source_items), d1)))
        self.target_item = ParameterBlock(
            "embed.target_item", rng.normal(0.0, 0.1, (len(id_maps.target_items), d1)))

    @property
    def params(self):
        return [self.user, self.source_item, self.target_item]

    def items(self, domain):
        return self.source_item if domain == "source" else self.target_item


def interaction_features(store, user_idx, item_idx, ratings, domain, rating_scale=1.0):
    """Rows ``[u_i || v_j || y_ij]`` of width ``2*d1 + 1``."""
    u = T.take(store.user, user_idx)
    v = T.take(store.items(domain), item_idx)
    y = Tensor(np.asarray(ratings, dtype=np.float64)[:, None] * rating_scale)
    return T.concat([u, v, y], axis=-1)


def encode_rows(store, net, user_idx, item_idx, ratings, domain, rating_scale=1.0):
    return net(interaction_features(store, user_idx, item_idx, ratings, domain, rating_scale))


def encode_interaction_set(store, net, interactions, domain="source", rating_scale=1.0):
    """Encode one set of interactions to an ``(n, width)`` row matrix."""
    kind = "source_items" if domain == "source" else "target_items"
    users = np.array([store.id_maps.lookup("users", x.user_id) for x in interactions], np.int64)
    items = np.array([store.id_maps.lookup(kind, x.item_id) for x in interactions], np.int64)
    ratings = np.array([x.rating for x in interactions], np.float64)
    return encode_rows(store, net, users, items, ratings, domain, rating_scale)


def aggregate_mean(rows, seg=None, n_seg=1):
    """Mean over rows (per segment when ``seg`` is given)."""
    rows = T.as_tensor(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError("cannot aggregate an empty interaction set")
    if seg is None:
        return T.segment_mean(rows, np.zeros(rows.shape[0], np.int64), 1).reshape(rows.shape[1])
    return T.segment_mean(rows, seg, n_seg)


@dataclass
class GaussianLatent:
    """Diagonal Gaussian; ``mu`` and ``sigma`` have shape (..., d2)."""

    mu: Tensor
    sigma: Tensor

    def log_prob(self, z):
        """Log density summed over the last axis."""
        std = (T.as_tensor(z) - self.mu) / self.sigma
        terms = T.square(std) + 2.0 * T.log(self.sigma) + LOG_2PI
        return -0.5 * terms.sum(axis=-1)

    def entropy(self):
        return (T.log(self.sigma) + 0.5 * (LOG_2PI + 1.0)).sum(axis=-1)


class GaussianHeads:
    """r' = ReLU(Lin(r)); mu = Lin(r'); sigma = 0.1 + 0.9 * sigmoid(Lin(r'))."""

    def __init__(self, width, rng, prefix="latent"):
        self.hidden = MLP(MLPSpec(width, (width,), ("relu",)), rng, f"{prefix}.hidden")
        self.mu = MLP(MLPSpec(width, (width,), ("identity",)), rng, f"{prefix}.mu")
        self.sigma = MLP(MLPSpec(width, (width,), ("identity",)), rng, f"{prefix}.sigma")

    @property
    def params(self):
        return self.hidden.params + self.mu.params + self.sigma.params


def gaussian_params(r, heads):
    r = T.as_tensor(r)
    hidden = heads.hidden(r)
    mu = heads.mu(hidden)
    pre = T.clip(heads.sigma(hidden), -SIGMA_PREACT_BOUND, SIGMA_PREACT_BOUND)
    return GaussianLatent(mu, 0.1 + 0.9 * T.sigmoid(pre))


def sample_latent(g, eps):
    """Reparameterised draw ``mu + eps * sigma``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1:] != g.mu.shape[-1:]:
        raise DimensionError(f"eps shape {eps.shape} does not match latent shape {g.mu.shape}")
    return g.mu + Tensor(eps) * g.sigma


def prior_and_posterior(batch, store, net, heads, training=True, rating_scale=1.0):
    """Prior from support sets; posterior from support plus query sets.

    The support rows computed for the prior are reused for the posterior;
    with a shared network and mean pooling this equals re-encoding the
    union. Returns ``(prior, posterior, support_rows)``; ``posterior`` is
    ``None`` outside training.
    """
    n = batch.n_tasks
    sup_rows = encode_rows(store, net, batch.user[batch.sup_seg], batch.sup_item,
                           batch.sup_rating, "source", rating_scale)
    prior = gaussian_params(aggregate_mean(sup_rows, batch.sup_seg, n), heads)
    if not training:
        return prior, None, sup_rows
    if len(batch.qry_item) == 0 or np.any(np.bincount(batch.qry_seg, minlength=n) == 0):
        raise ContractError("training needs a non-empty query set for every task")
    qry_rows = encode_rows(store, net, batch.user[batch.qry_seg], batch.qry_item,
                           batch.qry_rating, "target", rating_scale)
    union = T.concat([sup_rows, qry_rows], axis=0)
    seg = np.concatenate([batch.sup_seg, batch.qry_seg])
    posterior = gaussian_params(aggregate_mean(union, seg, n), heads)
    return prior, posterior, sup_rows
