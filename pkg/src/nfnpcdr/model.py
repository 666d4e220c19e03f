"""The full model: configuration, task batching and the forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import commonpref, decoder, flows, npencoder
from .numkernel import MLP, MLPSpec, ContractError, Tensor
from .numkernel import tensor as T


@dataclass(frozen=True)
class ModelConfig:
    d1: int = 10
    d2: int = 64
    d3: int = 64
    hidden: int = 64
    mlp_layers: int = 3
    decoder_layers: int = 3
    flow: str = "planar"
    flow_steps: int = 6
    pool_size: int = 10
    alpha_dof: float = 1.0
    rating_scale: float = 1.0
    no_flow: bool = False
    no_pool: bool = False
    no_film: bool = False

    def __post_init__(self):
        for name in ("d1", "d2", "d3", "hidden", "mlp_layers", "decoder_layers", "pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.flow not in flows.FAMILIES:
            raise ValueError(f"flow must be one of {flows.FAMILIES}, got {self.flow!r}")
        if self.flow_steps < 0:
            raise ValueError("flow_steps must be >= 0")

    @property
    def effective_steps(self):
        return 0 if (self.no_flow or self.flow == "none") else self.flow_steps

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass
class TaskBatch:
    """Index arrays for a group of tasks.

    Support rows (and query rows) of all tasks are concatenated; ``*_seg``
    gives each row's task position. Rows inside a task are ordered by
    (item index, rating) so the batch does not depend on input order.
    """

    task_ids: list
    user: np.ndarray
    sup_item: np.ndarray
    sup_rating: np.ndarray
    sup_seg: np.ndarray
    qry_item: np.ndarray
    qry_rating: np.ndarray
    qry_seg: np.ndarray

    @property
    def n_tasks(self):
        return len(self.task_ids)

    @property
    def n_pairs(self):
        return len(self.qry_item)


def _canonical(items, ratings):
    order = np.lexsort((ratings, items))
    return items[order], ratings[order]


def task_arrays(task, id_maps):
    user = id_maps.lookup("users", task.user_id)
    si = np.array([id_maps.lookup("source_items", x.item_id) for x in task.support], np.int64)
    sr = np.array([x.rating for x in task.support], np.float64)
    qi = np.array([id_maps.lookup("target_items", x.item_id) for x in task.query], np.int64)
    qr = np.array([x.rating for x in task.query], np.float64)
    return (task.user_id, user, *_canonical(si, sr), *_canonical(qi, qr))


def make_batch(items):
    """Stack per-task arrays (from :func:`task_arrays`) into a :class:`TaskBatch`."""
    if not items:
        raise ContractError("empty batch")
    ids = [it[0] for it in items]
    user = np.array([it[1] for it in items], np.int64)
    sup_seg = np.concatenate([np.full(len(it[2]), k, np.int64) for k, it in enumerate(items)])
    qry_seg = np.concatenate([np.full(len(it[4]), k, np.int64) for k, it in enumerate(items)])
    return TaskBatch(ids, user,
                     np.concatenate([it[2] for it in items]), np.concatenate([it[3] for it in items]),
                     sup_seg,
                     np.concatenate([it[4] for it in items]), np.concatenate([it[5] for it in items]),
                     qry_seg)


def batch_from_tasks(tasks, id_maps):
    return make_batch([task_arrays(t, id_maps) for t in tasks])


@dataclass
class ForwardOutput:
    prior: npencoder.GaussianLatent
    posterior: npencoder.GaussianLatent | None
    z0: Tensor
    flow: flows.FlowResult
    e: Tensor
    c: Tensor | None
    h: Tensor
    film: list
    pred: Tensor

    def activations(self):
        """Named numpy snapshots, for comparing runs."""
        acts = {"prior.mu": self.prior.mu.data, "prior.sigma": self.prior.sigma.data,
                "z0": self.z0.data, "zK": self.flow.z.data,
                "log_det": self.flow.sum_log_det.data, "e": self.e.data, "h": self.h.data,
                "pred": self.pred.data}
        if self.posterior is not None:
            acts["posterior.mu"] = self.posterior.mu.data
            acts["posterior.sigma"] = self.posterior.sigma.data
        if self.c is not None:
            acts["c"] = self.c.data
        for l, (eta, delta) in enumerate(self.film):
            acts[f"film.{l}.eta"] = np.broadcast_to(eta.data, eta.data.shape)
            acts[f"film.{l}.delta"] = np.broadcast_to(delta.data, delta.data.shape)
        return acts


class NFNPCDR:
    """Neural-process encoder + flow + preference pool + FiLM decoder.

    Each component draws its initial values from its own child seed, so
    switching an ablation flag leaves every other component's initial
    parameters untouched.
    """

    COMPONENTS = ("embed", "phi", "latent", "flow", "theta", "pool", "film", "decoder")

    def __init__(self, config, id_maps, seed=0):
        self.config = config
        self.id_maps = id_maps
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(self.COMPONENTS))
        rng = {name: np.random.default_rng(s) for name, s in zip(self.COMPONENTS, children)}
        c = config
        in_w = 2 * c.d1 + 1
        self.store = npencoder.EmbeddingStore(id_maps, c.d1, rng["embed"])
        self.phi = MLP(MLPSpec.stack(in_w, c.hidden, c.d2, c.mlp_layers), rng["phi"], "phi")
        self.latent = npencoder.GaussianHeads(c.d2, rng["latent"])
        self.flow = flows.FlowStack.build(c.flow if c.effective_steps else "none",
                                          c.effective_steps, c.d2, rng["flow"], hidden=c.hidden)
        self.theta = MLP(MLPSpec.stack(in_w, c.hidden, c.d3, c.mlp_layers), rng["theta"], "theta")
        self.pool = None if c.no_pool else commonpref.PreferencePool(
            c.d3, c.pool_size, rng["pool"], c.alpha_dof)
        self.dec_spec = decoder.DecoderSpec(2 * c.d1 + c.d2, c.hidden, c.decoder_layers)
        self.film_heads = None if c.no_film else decoder.FiLMHeads(c.d3, self.dec_spec, rng["film"])
        self.decoder = decoder.Decoder(self.dec_spec, rng["decoder"])

    def parameters(self):
        ps = self.store.params + self.phi.params + self.latent.params + self.flow.params
        ps += self.theta.params
        if self.pool is not None:
            ps += self.pool.params
        if self.film_heads is not None:
            ps += self.film_heads.params
        return ps + self.decoder.params

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def prepare(self, tasks):
        return [task_arrays(t, self.id_maps) for t in tasks]

    def batch(self, tasks):
        return batch_from_tasks(tasks, self.id_maps)

    def common_preference(self, batch):
        e = commonpref.identity_network(self.store, self.theta, batch, self.config.rating_scale)
        if self.pool is None:
            return e, None, e
        c = commonpref.soft_assign(e, self.pool)
        return e, c, commonpref.fuse_preference(e, self.pool, c)

    def forward(self, batch, eps, training=True):
        """Run every task of ``batch`` with latent noise ``eps`` of shape (T, d2).

        In training, z0 is drawn from the posterior q(z|C, Q); otherwise from
        the prior p(z|C).
        """
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (batch.n_tasks, self.config.d2):
            raise ContractError(f"eps must have shape {(batch.n_tasks, self.config.d2)}, got {eps.shape}")
        prior, posterior, _ = npencoder.prior_and_posterior(
            batch, self.store, self.phi, self.latent, training, self.config.rating_scale)
        z0 = npencoder.sample_latent(posterior if training else prior, eps)
        flow_out = flows.apply_flow(self.flow, z0)
        e, c, h = self.common_preference(batch)
        if self.film_heads is None:
            film = decoder.neutral_film(self.dec_spec)
            film_rows = film
        else:
            film = decoder.film_params(h, self.film_heads)
            film_rows = [(T.take(eta, batch.qry_seg), T.take(delta, batch.qry_seg))
                         for eta, delta in film]
        u = T.take(self.store.user, batch.user[batch.qry_seg])
        v = T.take(self.store.target_item, batch.qry_item)
        z = T.take(flow_out.z, batch.qry_seg)
        pred = decoder.decode(u, v, z, film_rows, self.decoder)
        return ForwardOutput(prior, posterior, z0, flow_out, e, c, h, film, pred)

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=np.float64)
