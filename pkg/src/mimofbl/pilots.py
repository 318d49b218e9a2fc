"""Pilot books, received pilot synthesis, and MMSE channel estimation.

A pilot book holds a family of mutually orthogonal sequences (scaled
DFT columns, squared norm equal to the sequence length) plus the map
from (cell, user) to sequence index.  Users mapped to the same index
contaminate each other's estimates; users on different indices drop
out of each other's statistics exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rng import complex_normal


@dataclass(frozen=True)
class PilotBook:
    """Orthogonal sequence family and its (cell, user) assignment."""

    sequences: np.ndarray    # (length, num_sequences), columns are pilots
    assignments: np.ndarray  # (cells, users per cell) -> sequence index
    reuse_factor: int = 1

    def __post_init__(self):
        seq = np.asarray(self.sequences, dtype=np.complex128)
        assign = np.asarray(self.assignments, dtype=np.intp)
        if seq.ndim != 2 or assign.ndim != 2:
            raise ValueError("sequences must be 2-D and assignments 2-D")
        gram = seq.conj().T @ seq
        target = self.length * np.eye(seq.shape[1])
        if np.abs(gram - target).max() > 1e-9 * self.length:
            raise ValueError(
                "sequences must be mutually orthogonal with squared "
                "norm equal to their length")
        if assign.min() < 0 or assign.max() >= seq.shape[1]:
            raise ValueError("assignment index out of range")
        object.__setattr__(self, "sequences", seq)
        object.__setattr__(self, "assignments", assign)

    @property
    def length(self) -> int:
        return self.sequences.shape[0]

    @property
    def num_cells(self) -> int:
        return self.assignments.shape[0]

    @property
    def users_per_cell(self) -> int:
        return self.assignments.shape[1]

    def sequence_for(self, cell: int, user: int) -> np.ndarray:
        return self.sequences[:, self.assignments[cell, user]]

    def shares_pilot(self, cell_a, user_a, cell_b, user_b) -> bool:
        return bool(self.assignments[cell_a, user_a]
                    == self.assignments[cell_b, user_b])


def _dft_sequences(length: int) -> np.ndarray:
    t = np.arange(length)
    return np.exp(-2j * math.pi * np.outer(t, t) / length)


def build_pilot_book(users_per_cell: int, reuse_factor: int, length: int,
                     num_cells: int) -> PilotBook:
    """Cyclic reuse book: cell l draws from sequence group l mod f.

    The sequence family is the scaled DFT of size length = f * K, so
    different groups are exactly orthogonal and contamination happens
    only between cells with equal l mod f.
    """
    if length != reuse_factor * users_per_cell:
        raise ValueError(
            f"pilot length must equal reuse_factor * users_per_cell "
            f"({reuse_factor * users_per_cell}), got {length}")
    if num_cells < 1:
        raise ValueError("num_cells must be >= 1")
    groups = np.arange(num_cells) % reuse_factor
    assignments = groups[:, None] * users_per_cell \
        + np.arange(users_per_cell)[None, :]
    return PilotBook(sequences=_dft_sequences(length),
                     assignments=assignments, reuse_factor=reuse_factor)


def two_user_book(shared: bool) -> PilotBook:
    """Length-2 book for the single-cell two-user study."""
    assignments = np.array([[0, 0]]) if shared else np.array([[0, 1]])
    return PilotBook(sequences=_dft_sequences(2), assignments=assignments)


def received_pilot_signal(channels, book: PilotBook, rho_ul: float,
                          sigma2_ul: float, rng) -> np.ndarray:
    """Superimpose every user's pilot as seen through its channel.

    channels has shape (..., cells, users, M): the channel from each
    user to the observing base station.  Returns (..., M, length).
    """
    if rho_ul <= 0.0 or sigma2_ul < 0.0:
        raise ValueError("rho_ul must be > 0 and sigma2_ul >= 0")
    channels = np.asarray(channels, dtype=np.complex128)
    cells, users = book.assignments.shape
    if channels.shape[-3:-1] != (cells, users):
        raise ValueError(
            f"channels shape {channels.shape} does not match the "
            f"book's ({cells}, {users}) assignment grid")
    m = channels.shape[-1]
    flat = channels.reshape(channels.shape[:-3] + (cells * users, m))
    seq = book.sequences[:, book.assignments.ravel()]  # (length, cells*users)
    signal = math.sqrt(rho_ul) * np.einsum(
        "...um,pu->...mp", flat, seq.conj())
    if sigma2_ul > 0.0:
        signal += complex_normal(
            rng, channels.shape[:-3] + (m, book.length), sigma2_ul)
    return signal


@dataclass(frozen=True)
class EstimationStatistics:
    """Fading-independent second-order statistics, one bundle per BS.

    phi is the covariance of each user's estimate, error_cov the
    covariance of the estimation error, and estimator the matrix that
    maps the despread pilot observation to the estimate.  All are
    (cells, users, M, M).
    """

    phi: np.ndarray
    error_cov: np.ndarray
    estimator: np.ndarray
    rho_ul: float
    sigma2_ul: float
    book: PilotBook
    _q_factors: dict = field(repr=False, compare=False)
    _correlations: np.ndarray = field(repr=False, compare=False)

    def pilot_covariance(self, cell: int, user: int) -> np.ndarray:
        """Q for the user's sequence: covariance of its despread signal."""
        seq_idx = int(self.book.assignments[cell, user])
        return self._q_factors[seq_idx][2]

    def upsilon(self, cell_a, user_a, cell_b, user_b) -> np.ndarray:
        """Cross-covariance of two contaminated estimates."""
        if not self.book.shares_pilot(cell_a, user_a, cell_b, user_b):
            raise ValueError(
                "cross-covariance is defined only for users sharing "
                "a pilot sequence")
        seq_idx = int(self.book.assignments[cell_a, user_a])
        cho = self._q_factors[seq_idx][:2]
        r_a = self._correlations[cell_a, user_a]
        r_b = self._correlations[cell_b, user_b]
        scale = self.rho_ul * self.book.length
        return scale * (r_a @ cho_solve(cho, r_b))


def estimation_statistics(correlations, book: PilotBook, rho_ul: float,
                          sigma2_ul: float) -> EstimationStatistics:
    """Assemble Q, estimate covariance, and estimator per user.

    correlations has shape (cells, users, M, M): each user's channel
    correlation toward the observing BS.  Q is accumulated per pilot
    sequence over exactly the users assigned to it, so orthogonal
    users contribute nothing, not even rounding dust.
    """
    if sigma2_ul <= 0.0:
        raise ValueError("sigma2_ul must be > 0 for an invertible Q")
    if rho_ul <= 0.0:
        raise ValueError("rho_ul must be > 0")
    corr = np.asarray(correlations, dtype=np.complex128)
    cells, users = book.assignments.shape
    if corr.shape[:2] != (cells, users) or corr.shape[2] != corr.shape[3]:
        raise ValueError(
            f"correlations shape {corr.shape} does not match the book")
    m = corr.shape[2]
    scale = rho_ul * book.length

    q_factors = {}
    for seq_idx in np.unique(book.assignments):
        members = np.nonzero(book.assignments == seq_idx)
        q = scale * corr[members].sum(axis=0) \
            + sigma2_ul * np.eye(m, dtype=np.complex128)
        c, low = cho_factor(q)
        q_factors[int(seq_idx)] = (c, low, q)

    phi = np.empty_like(corr)
    error_cov = np.empty_like(corr)
    estimator = np.empty_like(corr)
    for cell in range(cells):
        for user in range(users):
            cho = q_factors[int(book.assignments[cell, user])][:2]
            r = corr[cell, user]
            qinv_r = cho_solve(cho, r)
            p = scale * (r @ qinv_r)
            p = 0.5 * (p + p.conj().T)
            phi[cell, user] = p
            error_cov[cell, user] = r - p
            estimator[cell, user] = math.sqrt(rho_ul) * qinv_r.conj().T

    return EstimationStatistics(
        phi=phi, error_cov=error_cov, estimator=estimator, rho_ul=rho_ul,
        sigma2_ul=sigma2_ul, book=book, _q_factors=q_factors,
        _correlations=corr)


def mmse_estimate(y_pilot, book: PilotBook, stats: EstimationStatistics,
                  cell: int, user: int) -> np.ndarray:
    """Estimate one user's channel from the received pilot block.

    y_pilot has shape (..., M, length); the result is (..., M).  The
    despread observation is mapped through the precomputed estimator,
    which embeds the solve against Q.
    """
    y = np.asarray(y_pilot, dtype=np.complex128)
    if y.shape[-1] != book.length:
        raise ValueError(
            f"pilot block has {y.shape[-1]} columns, book length is "
            f"{book.length}")
    despread = y @ book.sequence_for(cell, user)
    w = stats.estimator[cell, user]
    return np.einsum("ab,...b->...a", w, despread)
