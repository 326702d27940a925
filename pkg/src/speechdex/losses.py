"""Training objectives.

The retrieval loss treats row i / column i of the similarity matrix as the
positive pair and every other column as an in-batch negative; it is the
mean of log-sum-exp minus the positive score, evaluated in both the
speech-to-text and text-to-speech directions. A spreadout penalty pushes
the L2-normalized embeddings of each side toward mutual orthogonality:
mean off-diagonal cosine squared plus a hinge on the mean squared cosine
above the 1/p level of a uniformly spread set.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

import speechdex.tensor as T
from speechdex.errors import ShapeError

log = logging.getLogger(__name__)


def similarity_matrix(tape, x: T.Tensor, y: T.Tensor) -> T.Tensor:
    """Raw dot products: entry (i, j) = x_i . y_j. No normalization."""
    if x.shape != y.shape:
        raise ShapeError(f"similarity needs matched batches, got {x.shape} and {y.shape}")
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"similarity expects [N>=1, p] embeddings, got {x.shape}")
    return T.matmul(tape, x, T.transpose(tape, y, (1, 0)))


def contrastive_loss_one_direction(tape, s: T.Tensor) -> T.Tensor:
    """Mean over rows of -log softmax at the diagonal, via stable log-sum-exp."""
    n, m = s.shape
    if n != m:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    lse = T.logsumexp_rows(tape, s)
    pos = T.take_diag(tape, s)
    return T.scale(tape, T.sum_all(tape, T.sub(tape, lse, pos)), 1.0 / n)


def bidirectional_contrastive(tape, x: T.Tensor, y: T.Tensor) -> T.Tensor:
    """Sum of both retrieval directions over one similarity matrix."""
    s = similarity_matrix(tape, x, y)
    fwd = contrastive_loss_one_direction(tape, s)
    rev = contrastive_loss_one_direction(tape, T.transpose(tape, s, (1, 0)))
    return T.add(tape, fwd, rev)


def spreadout_loss(tape, z: T.Tensor) -> T.Tensor:
    """Orthogonality pressure on normalized rows: M1^2 + max(0, M2 - 1/p)."""
    n, p = z.shape
    if n < 2:
        log.warning("spreadout needs at least 2 rows, got %d; defining it as 0", n)
        return T.Tensor(np.asarray(z.data.dtype.type(0.0)))
    zhat = T.l2_normalize_rows(tape, z)
    gram = T.matmul(tape, zhat, T.transpose(tape, zhat, (1, 0)))
    off = T.Tensor(np.ones((n, n), dtype=z.data.dtype) - np.eye(n, dtype=z.data.dtype))
    masked = T.mul(tape, gram, off)
    pairs = 1.0 / (n * (n - 1))
    m1 = T.scale(tape, T.sum_all(tape, masked), pairs)
    m2 = T.scale(tape, T.sum_all(tape, T.mul(tape, masked, masked)), pairs)
    return T.add(tape, T.mul(tape, m1, m1),
                 T.relu(tape, T.add_scalar(tape, m2, -1.0 / p)))


class LossParts(NamedTuple):
    total: T.Tensor
    contrastive: float
    spreadout: float


def total_loss_with_parts(tape, x: T.Tensor, y: T.Tensor,
                          spreadout_weight: float = 1.0) -> LossParts:
    contrastive = bidirectional_contrastive(tape, x, y)
    spread = T.add(tape, spreadout_loss(tape, x), spreadout_loss(tape, y))
    total = T.add(tape, contrastive, T.scale(tape, spread, spreadout_weight))
    return LossParts(total, float(contrastive.data), float(spread.data))


def total_loss(tape, x: T.Tensor, y: T.Tensor, spreadout_weight: float = 1.0) -> T.Tensor:
    """Bidirectional contrastive plus weighted spreadout of both sides."""
    return total_loss_with_parts(tape, x, y, spreadout_weight).total
