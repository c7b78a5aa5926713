"""Four-connected CRF: Gibbs energy, brute-force marginals and mean-field inference.

Pairwise kernels ``k`` have four channels ordered ``up, right, down, left``.
Channel ``d`` at pixel ``i`` weights the value that ``spatial_shift(Q, d)``
carries into ``i``, i.e. the label distribution of the neighbour ``i + src[d]``
(``up`` -> pixel below, ``right`` -> pixel to the left, and so on).  The energy
uses the same reading so that the network and the oracle agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DIRECTIONS, Tensor

# (row, col) offset of the neighbour whose value shift_d moves into a pixel
SOURCE_OFFSET = {"up": (1, 0), "right": (0, -1), "down": (-1, 0), "left": (0, 1)}

MAX_ENUMERATION = 2**20


@dataclass
class CrfPotentials:
    psi_u: np.ndarray  # P×h×w unary costs
    k: np.ndarray  # 4×h×w positive pairwise kernels

    def __post_init__(self):
        self.psi_u = np.asarray(self.psi_u, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.k.shape[0] != 4 or self.k.shape[1:] != self.psi_u.shape[1:]:
            raise ValueError(f"k shape {self.k.shape} does not match psi_u {self.psi_u.shape}")

    @property
    def num_labels(self) -> int:
        return self.psi_u.shape[0]


def _edges(h: int, w: int):
    """Undirected four-connected edges as (i, j, channel) with i the top/left pixel.

    The kernel for an edge is read at ``i`` from the channel whose shift brings
    ``j`` into ``i``: vertical edges use ``up``, horizontal edges use ``left``.
    """
    for r in range(h):
        for c in range(w):
            if r + 1 < h:
                yield (r, c), (r + 1, c), DIRECTIONS.index("up")
            if c + 1 < w:
                yield (r, c), (r, c + 1), DIRECTIONS.index("left")


def gibbs_energy(labeling, pots: CrfPotentials, mu) -> float:
    x = np.asarray(labeling)
    mu = np.asarray(mu, dtype=np.float64)
    p, h, w = pots.psi_u.shape
    if x.shape != (h, w):
        raise ValueError(f"labeling shape {x.shape} != potentials {(h, w)}")
    if x.min() < 0 or x.max() >= p:
        raise ValueError(f"labels must lie in 0..{p - 1}")
    rows, cols = np.indices((h, w))
    energy = pots.psi_u[x, rows, cols].sum()
    for (r, c), (r2, c2), ch in _edges(h, w):
        energy += mu[x[r, c], x[r2, c2]] * pots.k[ch, r, c]
    return float(energy)


def _all_energies(pots: CrfPotentials, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, h, w = pots.psi_u.shape
    n = h * w
    # every labeling as a row of n labels, first pixel most significant
    labels = np.stack(np.unravel_index(np.arange(p**n), (p,) * n), axis=1)
    unary = pots.psi_u.reshape(p, n)
    energy = unary[labels, np.arange(n)].sum(axis=1)
    for (r, c), (r2, c2), ch in _edges(h, w):
        i, j = r * w + c, r2 * w + c2
        energy += mu[labels[:, i], labels[:, j]] * pots.k[ch, r, c]
    return labels, energy


def exact_marginals(pots: CrfPotentials, mu) -> np.ndarray:
    """Per-pixel marginals of exp(-E)/Z by enumerating every labeling."""
    mu = np.asarray(mu, dtype=np.float64)
    p, h, w = pots.psi_u.shape
    if float(p) ** (h * w) > MAX_ENUMERATION:
        raise ValueError(f"{p}^{h * w} labelings exceeds the enumeration limit {MAX_ENUMERATION}")
    labels, energy = _all_energies(pots, mu)
    logw = -energy - (-energy).max()
    weight = np.exp(logw)
    weight /= weight.sum()
    marg = np.zeros((p, h * w))
    for i in range(h * w):
        marg[:, i] = np.bincount(labels[:, i], weights=weight, minlength=p)
    return marg.reshape(p, h, w)


def partition_function(pots: CrfPotentials, mu) -> float:
    _, energy = _all_energies(pots, np.asarray(mu, dtype=np.float64))
    return float(np.exp(-energy).sum())


# ---------------------------------------------------------------------------
# the recurrent layers (batched, N×P×h×w)


def message_passing(q: Tensor, k: Tensor) -> Tensor:
    """Sum over the four directions of shift_d(Q) weighted by kernel channel d."""
    total = None
    for d, direction in enumerate(DIRECTIONS):
        term = T.mul(T.spatial_shift(q, direction), T.channel_slice(k, d, d + 1))
        total = term if total is None else T.add(total, term)
    return total


def compatibility_transform(m: Tensor, mu: Tensor) -> Tensor:
    """Bias-free 1×1 convolution: out[l] = sum_l' mu[l, l'] * m[l']."""
    p = mu.shape[0]
    return T.conv2d(m, T.reshape(mu, (p, p, 1, 1)))


def local_update_normalize(c: Tensor, psi_u: Tensor) -> Tensor:
    return T.softmax_channels(T.sub(T.neg(psi_u), c))


def mean_field_infer(
    psi_u: Tensor,
    k: Tensor,
    mu: Tensor,
    iterations: int = 5,
    init: str = "softmax",
    return_all: bool = False,
):
    """Unrolled mean-field updates.

    ``init="softmax"`` starts from softmax(-psi_u); ``init="raw"`` feeds psi_u
    itself into the first message pass.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if init == "softmax":
        q = T.softmax_channels(T.neg(psi_u))
    elif init == "raw":
        q = psi_u
    else:
        raise ValueError(f"unknown init {init!r}")
    history = []
    for _ in range(iterations):
        m = message_passing(q, k)
        c = compatibility_transform(m, mu)
        q = local_update_normalize(c, psi_u)
        history.append(q)
    return history if return_all else q


def mean_field_numpy(pots: CrfPotentials, mu, iterations: int = 5, init: str = "softmax") -> np.ndarray:
    """Convenience wrapper: single-image mean field on numpy arrays (float64)."""
    with T.precision(np.float64):
        q = mean_field_infer(
            Tensor(pots.psi_u[None]), Tensor(pots.k[None]), Tensor(np.asarray(mu)), iterations, init
        )
    return q.data[0]


def init_compatibility(num_labels: int, rng: np.random.Generator, kind: str = "potts") -> np.ndarray:
    """Initial label compatibility matrix.

    "potts": 1 off the diagonal, 0 on it (disagreeing neighbours cost energy);
    "zero": all zero (pure unary inference until learned);
    "he": He-scaled Gaussian with fan-in P.
    """
    p = num_labels
    if kind == "potts":
        return (1.0 - np.eye(p)).astype(np.float32)
    if kind == "zero":
        return np.zeros((p, p), dtype=np.float32)
    if kind == "he":
        return (rng.standard_normal((p, p)) * np.sqrt(2.0 / p)).astype(np.float32)
    raise ValueError(f"unknown compatibility init {kind!r}")
