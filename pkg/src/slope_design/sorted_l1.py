"""Sorted L1 norm, its proximal operator and the tie structure of prox outputs."""

from dataclasses import dataclass

import numpy as np
from numba import njit

# two magnitudes tie iff |a - b| <= TIE_RTOL * max(1, |a|, |b|)
TIE_RTOL = 1e-9


def as_penalty(values, p=None, name="penalty"):
    """Validate a non-negative, non-increasing penalty sequence.

    Parameters
    ----------
    values : array_like
        Candidate penalty vector.
    p : int, optional
        Required length.
    name : str
        Used in error messages.

    Returns
    -------
    ndarray
        Float copy of ``values``.
    """
    lam = np.array(values, dtype=float).ravel()
    if p is not None and lam.size != p:
        raise ValueError(f"{name} has length {lam.size}, expected {p}")
    if not np.all(np.isfinite(lam)):
        raise ValueError(f"{name} must be finite")
    if lam.size and lam[-1] < 0:
        raise ValueError(f"{name} must be non-negative")
    if np.any(np.diff(lam) > 0):
        raise ValueError(f"{name} must be non-increasing")
    return lam


def _check_lengths(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"length mismatch: {a.shape[-1]} != {b.shape[-1]}")


def sorted_l1_norm(b, theta):
    """Return sum_i theta_i |b|_(i) with |b|_(1) >= ... >= |b|_(p)."""
    b = np.asarray(b, dtype=float)
    theta = np.asarray(theta, dtype=float)
    _check_lengths(b, theta)
    return float(np.dot(theta, np.sort(np.abs(b))[::-1]))


@njit(cache=True)
def _pava_decreasing(v):
    # in-place: replace v by its projection onto non-increasing vectors
    p = v.shape[0]
    start = np.empty(p, np.int64)
    total = np.empty(p)
    mean = np.empty(p)
    k = 0
    for i in range(p):
        start[k] = i
        total[k] = v[i]
        mean[k] = v[i]
        while k > 0 and mean[k - 1] < mean[k]:
            k -= 1
            total[k] += total[k + 1]
            mean[k] = total[k] / (i - start[k] + 1)
        k += 1
    for b in range(k):
        stop = start[b + 1] if b + 1 < k else p
        for i in range(start[b], stop):
            v[i] = mean[b]


@njit(cache=True)
def _prox_rows(y, order, theta, out):
    n, p = y.shape
    v = np.empty(p)
    for r in range(n):
        for i in range(p):
            v[i] = abs(y[r, order[r, i]]) - theta[i]
        _pava_decreasing(v)
        for i in range(p):
            x = v[i] if v[i] > 0.0 else 0.0
            j = order[r, i]
            out[r, j] = x if y[r, j] >= 0 else -x


def decreasing_projection(v):
    """Project onto non-increasing vectors (no sign constraint)."""
    w = np.array(v, dtype=float)
    _pava_decreasing(w)
    return w


def prox_sorted_l1(y, theta):
    """Proximal operator of the sorted L1 norm.

    Solves ``argmin_b 0.5 * ||y - b||^2 + J_theta(b)`` by sorting ``|y|``,
    pooling adjacent violators of ``|y|_(i) - theta_i`` and restoring signs
    and positions.  A 2-d ``y`` is treated row by row with the same ``theta``.
    """
    y = np.asarray(y, dtype=float)
    theta = np.ascontiguousarray(theta, dtype=float)
    _check_lengths(y, theta)
    y2 = np.ascontiguousarray(np.atleast_2d(y))
    out = np.empty_like(y2)
    order = np.argsort(-np.abs(y2), axis=1, kind="stable")
    _prox_rows(y2, order, theta, out)
    return out.reshape(y.shape)


def _new_run_flags(sorted_mags):
    # sorted_mags descending along the last axis; True where a new tie run starts
    prev = sorted_mags[..., :-1]
    cur = sorted_mags[..., 1:]
    scale = np.maximum(1.0, np.maximum(np.abs(prev), np.abs(cur)))
    differs = np.abs(prev - cur) > TIE_RTOL * scale
    first = np.ones(sorted_mags.shape[:-1] + (1,), dtype=bool)
    return np.concatenate([first, differs], axis=-1)


def modified_l0(v):
    """Number of distinct nonzero magnitudes in ``v`` (ties up to ``TIE_RTOL``)."""
    mags = np.sort(np.abs(np.asarray(v, dtype=float)).ravel())[::-1]
    mags = mags[mags > 0]
    if mags.size == 0:
        return 0
    return int(np.count_nonzero(_new_run_flags(mags)))


def modified_l0_rows(V):
    """Row-wise :func:`modified_l0` for a 2-d array."""
    mags = -np.sort(-np.abs(V), axis=1)
    flags = _new_run_flags(mags) & (mags > 0)
    return np.count_nonzero(flags, axis=1)


@dataclass(frozen=True)
class TieStructure:
    """Ranking and tie sets of ``|eta|`` (0-based indices).

    Attributes
    ----------
    sigma : ndarray
        ``sigma[i]`` is the index holding the ``i``-th largest magnitude.
    rank : ndarray
        Inverse of ``sigma``: ``rank[sigma[i]] == i``.
    labels : ndarray
        Tie-set id of each index; ids are numbered by decreasing magnitude.
    """

    sigma: np.ndarray
    rank: np.ndarray
    labels: np.ndarray

    @property
    def tie_sets(self):
        return [np.flatnonzero(self.labels == c) for c in range(self.labels.max() + 1)]

    def tie_set(self, j):
        """Indices sharing the magnitude of index ``j``."""
        return np.flatnonzero(self.labels == self.labels[j])

    def sizes(self):
        """``|I_j|`` for every index ``j``."""
        return np.bincount(self.labels)[self.labels]


def tie_structure(eta):
    """Compute the ranking permutation and tie sets of ``|eta|``.

    Ties in the ranking are broken by the smaller original index.
    """
    mags = np.abs(np.asarray(eta, dtype=float).ravel())
    sigma = np.argsort(-mags, kind="stable")
    rank = np.empty_like(sigma)
    rank[sigma] = np.arange(sigma.size)
    run_ids = np.cumsum(_new_run_flags(mags[sigma])) - 1
    labels = np.empty_like(run_ids)
    labels[sigma] = run_ids
    return TieStructure(sigma=sigma, rank=rank, labels=labels)
