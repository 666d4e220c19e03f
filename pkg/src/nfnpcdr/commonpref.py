"""Preference identity network, Student's-t preference pool, clustering loss."""

from __future__ import annotations

import csv
import io

import numpy as np

from .npencoder import aggregate_mean, encode_rows
from .numkernel import ParameterBlock, Tensor
from .numkernel import tensor as T

GUARD = 1e-12


class PreferencePool:
    """N trainable centroids stored column-wise in a (d3, N) matrix."""

    def __init__(self, dim, size, rng, alpha_dof=1.0):
        if size < 1:
            raise ValueError(f"pool size must be >= 1, got {size}")
        if alpha_dof <= 0:
            raise ValueError(f"degrees of freedom must be positive, got {alpha_dof}")
        self.alpha_dof = float(alpha_dof)
        self.centroids = ParameterBlock("pool.centroids", rng.normal(0.0, 0.1, (dim, size)))

    @property
    def size(self):
        return self.centroids.shape[1]

    @property
    def params(self):
        return [self.centroids]


def identity_network(store, net, batch, rating_scale=1.0):
    """Mean of per-interaction identity encodings over each support set -> (T, d3)."""
    rows = encode_rows(store, net, batch.user[batch.sup_seg], batch.sup_item,
                       batch.sup_rating, "source", rating_scale)
    return aggregate_mean(rows, batch.sup_seg, batch.n_tasks)


def soft_assign(e, pool):
    """Student's-t similarity of ``e`` (shape (..., d3)) to each centroid, normalised."""
    e = T.as_tensor(e)
    a = pool.alpha_dof
    diff = e.reshape(e.shape + (1,)) - pool.centroids
    dist2 = T.square(diff).sum(axis=-2)
    kernel = T.power(1.0 + dist2 / a, -(a + 1.0) / 2.0)
    return kernel / kernel.sum(axis=-1, keepdims=True)


def fuse_preference(e, pool, c):
    """h = e + P c."""
    return T.as_tensor(e) + T.matmul(c, T.transpose(pool.centroids))


def auxiliary_distribution(M):
    """Sharpened, frequency-normalised self-training target (no gradient).

    D_in = (M_in^2 / f_n) / sum_n' (M_in'^2 / f_n'), with f_n = sum_i M_in.
    """
    M = np.asarray(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
    weight = M * M / (M.sum(axis=0) + GUARD)
    return weight / weight.sum(axis=1, keepdims=True)


def cluster_loss(M, D):
    """KL(D || M) summed over tasks and centroids; ``D`` is a constant."""
    M = T.as_tensor(M)
    D = np.asarray(D, dtype=np.float64)
    if D.shape != M.shape:
        raise ValueError(f"shape mismatch: M {M.shape} vs D {D.shape}")
    log_d = Tensor(np.log(D + GUARD))
    return (Tensor(D) * (log_d - T.log(M + GUARD))).sum()


def assignments_csv(task_ids, assignments):
    """CSV text with header ``task_id,c_1,...,c_N``."""
    assignments = np.asarray(assignments)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task_id"] + [f"c_{n + 1}" for n in range(assignments.shape[1])])
    for tid, row in zip(task_ids, assignments):
        writer.writerow([tid] + [repr(float(x)) for x in row])
    return buf.getvalue()
