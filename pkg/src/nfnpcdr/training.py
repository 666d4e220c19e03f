"""Losses, the training loop, cold-start evaluation and entropy estimates."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import commonpref
from .data import build_task
from .decoder import clamp_ratings
from .flows import FlowNumericError, apply_flow
from .model import NFNPCDR, make_batch
from .npencoder import IdMaps
from .numkernel import AdamState, ContractError, Tensor, adam_step, backward, no_grad
from .numkernel import tensor as T


class TrainingNumericError(ArithmeticError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.3
    batch_size: int = 128
    lr: float = 0.01
    epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    support_length: int = 20
    seed: int = 0
    # epochs before the patience counter starts (the best epoch is still tracked)
    min_epochs: int = 0
    # "batch": clustering target from each minibatch; "epoch": from all tasks at epoch start
    aux_target: str = "batch"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.support_length < 1:
            raise ValueError("support_length must be >= 1")
        if self.aux_target not in ("batch", "epoch"):
            raise ValueError(f"aux_target must be 'batch' or 'epoch', got {self.aux_target!r}")
        if self.patience < 1 or self.min_epochs < 0:
            raise ValueError("patience must be >= 1 and min_epochs >= 0")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    rec: float
    kl: float
    cluster: float
    total: float


# -- losses -------------------------------------------------------------------------


def rec_loss(pred, truth, seg=None, n_seg=1):
    """Mean squared error per task (a scalar when ``seg`` is None)."""
    pred = T.as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or truth.size == 0:
        raise ContractError(f"need equal, non-empty predictions/truths, got {pred.shape} vs {truth.shape}")
    sq = T.square(pred - truth)
    if seg is None:
        return sq.mean()
    return T.segment_mean(sq.reshape(-1, 1), seg, n_seg).reshape(n_seg)


def kl_loss(posterior, z0, flow_result, prior):
    """Single-sample estimate of log q0(z0) - sum log|det| - log p(zK)."""
    value = posterior.log_prob(z0) - flow_result.sum_log_det - prior.log_prob(flow_result.z)
    if not np.all(np.isfinite(value.data)):
        raise TrainingNumericError("non-finite density in the KL term (component: kl)")
    return value


def total_loss(rec, kl, cluster, lam):
    """mean_i(rec_i + kl_i) + lam * cluster, plus its float breakdown."""
    rec, kl, cluster = T.as_tensor(rec), T.as_tensor(kl), T.as_tensor(cluster)
    if rec.data.size == 0:
        raise ContractError("empty batch")
    total = (rec + kl).mean() + lam * cluster
    breakdown = LossBreakdown(float(rec.data.mean()), float(kl.data.mean()),
                              float(cluster.data), float(total.data))
    return total, breakdown


def batch_objective(model, batch, eps, lam, target=None):
    """Full training objective of one batch.

    ``target`` fixes the auxiliary distribution; by default it is derived
    from this batch's assignments and treated as a constant.
    """
    out = model.forward(batch, eps, training=True)
    rec = rec_loss(out.pred, batch.qry_rating, batch.qry_seg, batch.n_tasks)
    kl = kl_loss(out.posterior, out.z0, out.flow, out.prior)
    if out.c is None:
        cluster = Tensor(0.0)
    else:
        D = commonpref.auxiliary_distribution(out.c) if target is None else target
        cluster = commonpref.cluster_loss(out.c, D)
    total, breakdown = total_loss(rec, kl, cluster, lam)
    return total, breakdown, out


# -- training -------------------------------------------------------------------------


def _check_finite(breakdown, epoch, batch):
    for name in ("rec", "kl", "cluster", "total"):
        if not math.isfinite(getattr(breakdown, name)):
            raise TrainingNumericError(
                f"epoch {epoch}: non-finite {name} loss in batch with tasks {batch.task_ids[:5]}",
                epoch=epoch)


def epoch_target(model, prepared, chunk=512):
    """Auxiliary distribution over all ``prepared`` tasks at the current parameters."""
    rows = []
    with no_grad():
        for start in range(0, len(prepared), chunk):
            rows.append(model.common_preference(make_batch(prepared[start:start + chunk]))[1].data)
    return commonpref.auxiliary_distribution(np.concatenate(rows))


def train_epoch(model, prepared, config, state, rng, epoch=1):
    """One pass over ``prepared`` task arrays in shuffled minibatches."""
    order = rng.permutation(len(prepared))
    history = []
    params = model.parameters()
    full_target = None
    if config.aux_target == "epoch" and model.pool is not None:
        full_target = epoch_target(model, prepared)
    for start in range(0, len(order), config.batch_size):
        picked = order[start:start + config.batch_size]
        batch = make_batch([prepared[k] for k in picked])
        eps = rng.standard_normal((batch.n_tasks, model.config.d2))
        target = None if full_target is None else full_target[picked]
        try:
            total, breakdown, _ = batch_objective(model, batch, eps, config.lam, target)
        except FlowNumericError as exc:
            raise TrainingNumericError(
                f"epoch {epoch}: flow failure in batch with tasks {batch.task_ids[:5]}: {exc}",
                epoch=epoch) from exc
        _check_finite(breakdown, epoch, batch)
        backward(total)
        adam_step(state, params)
        history.append(breakdown)
    return history


@dataclass
class EvalReport:
    mae: float
    rmse: float
    n_tasks: int
    n_pairs: int
    entropy_z0: float | None = None
    entropy_zK: float | None = None
    residuals: dict = field(default_factory=dict)

    def to_json(self):
        return {"mae": self.mae, "rmse": self.rmse, "entropy_z0": self.entropy_z0,
                "entropy_zK": self.entropy_zK, "n_tasks": self.n_tasks, "n_pairs": self.n_pairs,
                "residuals": self.residuals}


def predict(model, prepared, n_prior_samples=1, seed=0, chunk=512):
    """Raw (unclamped) predictions for every query pair, via prior samples."""
    rng = np.random.default_rng(seed)
    preds, truths, segs = [], [], []
    offset = 0
    with no_grad():
        for start in range(0, len(prepared), chunk):
            batch = make_batch(prepared[start:start + chunk])
            acc = np.zeros(batch.n_pairs)
            for _ in range(n_prior_samples):
                eps = rng.standard_normal((batch.n_tasks, model.config.d2))
                acc += model.forward(batch, eps, training=False).pred.data
            preds.append(acc / n_prior_samples)
            truths.append(batch.qry_rating)
            segs.append(batch.qry_seg + offset)
            offset += batch.n_tasks
    return np.concatenate(preds), np.concatenate(truths), np.concatenate(segs)


def metrics(pred, truth):
    """Pooled MAE and RMSE after clamping predictions to [1, 5]."""
    pred = clamp_ratings(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.size == 0:
        raise ContractError("no query pairs to score")
    err = pred - truth
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def evaluate(model, tasks, n_prior_samples=1, seed=0, entropy_samples=0):
    """Cold-start evaluation: predict every query rating from the support set alone."""
    prepared = model.prepare(tasks) if tasks and not isinstance(tasks[0], tuple) else list(tasks)
    if not prepared or sum(len(p[4]) for p in prepared) == 0:
        raise ContractError("evaluation needs at least one query pair")
    pred, truth, seg = predict(model, prepared, n_prior_samples, seed)
    mae, rmse = metrics(pred, truth)
    abs_err = np.abs(clamp_ratings(pred) - truth)
    per_task = np.bincount(seg, weights=abs_err) / np.bincount(seg)
    report = EvalReport(mae, rmse, len(prepared), len(truth), residuals={
        "mean": float(np.mean(clamp_ratings(pred) - truth)),
        "task_mae_min": float(per_task.min()),
        "task_mae_median": float(np.median(per_task)),
        "task_mae_max": float(per_task.max()),
    })
    if entropy_samples:
        report.entropy_z0, report.entropy_zK = estimate_entropy(
            model, prepared, entropy_samples, seed=seed + 1)
    return report


def estimate_entropy(model, tasks, n_samples, seed=0, chunk=256, return_se=False):
    """Monte Carlo entropies of z0 ~ p(z|C) and zK = flow(z0), averaged over tasks.

    H(z0) is analytic; H(zK) = -E[log p0(z0) - sum log|det|].
    """
    if n_samples < 100:
        raise ValueError("entropy estimation needs at least 100 samples per task")
    prepared = model.prepare(tasks) if tasks and not isinstance(tasks[0], tuple) else list(tasks)
    rng = np.random.default_rng(seed)
    d2 = model.config.d2
    h0, hk = [], []
    with no_grad():
        for start in range(0, len(prepared), chunk):
            batch = make_batch(prepared[start:start + chunk])
            eps0 = np.zeros((batch.n_tasks, d2))
            prior = model.forward(batch, eps0, training=False).prior
            n = batch.n_tasks
            eps = rng.standard_normal((n, n_samples, d2))
            mu, sigma = prior.mu.data[:, None, :], prior.sigma.data[:, None, :]
            z0 = (mu + eps * sigma).reshape(n * n_samples, d2)
            res = apply_flow(model.flow, z0)
            log_q0 = -0.5 * np.sum(eps * eps + 2.0 * np.log(sigma) + np.log(2.0 * np.pi), axis=-1)
            sample_h = -(log_q0 - res.sum_log_det.data.reshape(n, n_samples))
            h0.append(prior.entropy().data)
            hk.append(sample_h)
    h0 = np.concatenate(h0)
    hk = np.concatenate(hk)
    est0, estk = float(h0.mean()), float(hk.mean())
    if return_se:
        se = float(hk.mean(axis=0).std(ddof=1) / math.sqrt(hk.shape[1])) if hk.shape[1] > 1 else 0.0
        return est0, estk, se
    return est0, estk


def _split_validation(prepared, config):
    rng = np.random.default_rng([config.seed, 17])
    order = rng.permutation(len(prepared))
    n_val = int(round(config.val_fraction * len(prepared)))
    if len(prepared) < 2:
        n_val = 0
    val = [prepared[k] for k in sorted(order[:n_val])]
    fit = [prepared[k] for k in sorted(order[n_val:])]
    return fit, val


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_mae: float | None


def log_line(record):
    return json.dumps(record, separators=(", ", ": "))


def train(model, tasks, config, log=None):
    """Train with Adam; early-stop on validation MAE and restore the best weights.

    ``log`` (optional callable) receives one JSON line per epoch.
    """
    prepared = model.prepare(tasks)
    fit, val = _split_validation(prepared, config)
    if not fit:
        raise ContractError("no training tasks")
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    best_mae, best_epoch, best_state, stale = math.inf, 0, None, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        batches = train_epoch(model, fit, config, state, rng, epoch)
        record = {"epoch": epoch}
        for name in ("rec", "kl", "cluster", "total"):
            key = "loss_c" if name == "cluster" else f"loss_{name}"
            record[key] = float(np.mean([getattr(b, name) for b in batches]))
        if val:
            mae, rmse = metrics(*predict(model, val, 1, seed=config.seed)[:2])
        else:
            mae = rmse = float("nan")
        record["val_mae"], record["val_rmse"] = mae, rmse
        history.append(record)
        if log is not None:
            log(log_line(record))
        if not val:
            best_epoch = epoch
            continue
        if mae < best_mae:
            best_mae, best_epoch, best_state, stale = mae, epoch, model.state_dict(), 0
        elif epoch > config.min_epochs:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, None if not val else best_mae)


def build_tasks(pre, users, support_length):
    """Tasks for ``users`` of a preprocessed split, in the given order."""
    return [build_task(u, pre.source, pre.target, support_length) for u in users]


def fit(pre, model_config, config, log=None):
    """Build a model on ``pre``'s id space and train it on the training users."""
    model = NFNPCDR(model_config, IdMaps.from_datasets(pre.source, pre.target), config.seed)
    result = train(model, build_tasks(pre, pre.train, config.support_length), config, log)
    return model, result
