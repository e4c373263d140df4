"""Exact inference over a score lattice.

A lattice is an (M, L, L) float64 array: entry [m, a, b] scores label b
at position m given label a at position m-1.  Position 0 is conditioned
on the synthetic BOS label; by convention its row 0 holds the value used
by every algorithm here (lattices produced by the potentials module fill
all rows of position 0 identically).

All recursions run in log space with 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import log_sum_exp, log_sum_exp_over_rows


@dataclass
class DecodeResult:
    labels: list
    score: float


def _check_lattice(lat) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    if lat.ndim != 3 or lat.shape[1] != lat.shape[2] or lat.shape[0] < 1:
        raise ValueError("lattice must have shape (M, L, L), got %r" % (lat.shape,))
    return lat


def _forward(lat):
    """Log-space forward messages alpha[m, b], BOS handled at position 0."""
    M, L, _ = lat.shape
    alpha = np.empty((M, L))
    alpha[0] = lat[0, 0]
    for m in range(1, M):
        alpha[m] = log_sum_exp_over_rows(alpha[m - 1][:, None] + lat[m])
    return alpha


def _backward(lat):
    """Log-space backward messages beta[m, a]."""
    M, L, _ = lat.shape
    beta = np.empty((M, L))
    beta[M - 1] = 0.0
    for m in range(M - 2, -1, -1):
        beta[m] = log_sum_exp_over_rows((lat[m + 1] + beta[m + 1][None, :]).T)
    return beta


def log_partition(lat) -> float:
    """log of the sum of exp path scores over all label sequences."""
    lat = _check_lattice(lat)
    return log_sum_exp(_forward(lat)[-1])


def _marginals_from_messages(lat, alpha, beta, log_z):
    M, L, _ = lat.shape
    p = np.zeros((M, L, L))
    p[0, 0] = np.exp(lat[0, 0] + beta[0] - log_z)
    if M > 1:
        p[1:] = np.exp(alpha[:-1, :, None] + lat[1:] + beta[1:, None, :] - log_z)
    return p


def pairwise_marginals(lat) -> np.ndarray:
    """Posterior P(y_{m-1}=a, y_m=b | x) as an (M, L, L) array.

    At position 0 the previous label is BOS with certainty, so only row 0
    is populated there; every position sums to one.
    """
    lat = _check_lattice(lat)
    alpha = _forward(lat)
    beta = _backward(lat)
    return _marginals_from_messages(lat, alpha, beta, log_sum_exp(alpha[-1]))


def viterbi(lat) -> DecodeResult:
    """Highest-scoring label path.

    Ties are broken toward the lower label index at every backtrack step
    (argmax returns the first maximizer), so output is deterministic.
    """
    lat = _check_lattice(lat)
    M, L, _ = lat.shape
    best = lat[0, 0].copy()
    back = np.zeros((M, L), dtype=np.int64)
    for m in range(1, M):
        cand = best[:, None] + lat[m]
        back[m] = np.argmax(cand, axis=0)
        best = np.take_along_axis(cand, back[m][None, :], axis=0)[0]
    last = int(np.argmax(best))
    labels = [0] * M
    labels[M - 1] = last
    for m in range(M - 1, 0, -1):
        labels[m - 1] = int(back[m, labels[m]])
    return DecodeResult(labels=labels, score=float(best[last]))


def path_score(lat, labels) -> float:
    """Sum of lattice entries along a label path (row 0 at position 0)."""
    lat = _check_lattice(lat)
    s = lat[0, 0, labels[0]]
    for m in range(1, lat.shape[0]):
        s = s + lat[m, labels[m - 1], labels[m]]
    return float(s)


def nll_and_grad(lat, gold):
    """Negative log-likelihood of `gold` and its lattice gradient.

    The gradient is pairwise marginals minus the gold indicator, the
    expected-minus-observed sufficient statistics of the path
    distribution.
    """
    lat = _check_lattice(lat)
    M, L, _ = lat.shape
    gold = list(gold)
    if len(gold) != M:
        raise ValueError("gold path length %d does not match lattice length %d" % (len(gold), M))
    for y in gold:
        if not 0 <= y < L:
            raise ValueError("invalid label index %r for %d labels" % (y, L))
    alpha = _forward(lat)
    beta = _backward(lat)
    log_z = log_sum_exp(alpha[-1])
    grad = _marginals_from_messages(lat, alpha, beta, log_z)
    grad[0, 0, gold[0]] -= 1.0
    for m in range(1, M):
        grad[m, gold[m - 1], gold[m]] -= 1.0
    return log_z - path_score(lat, gold), grad


def decode_softmax(lat) -> DecodeResult:
    """Position-independent argmax decode for softmax-family lattices.

    Assumes every row of a position carries the same scores, which holds
    for lattices built by the softmax family; then the result equals
    viterbi's.
    """
    lat = _check_lattice(lat)
    labels = [int(k) for k in np.argmax(lat[:, 0, :], axis=1)]
    return DecodeResult(labels=labels, score=path_score(lat, labels))
