"""Cell geometry, large-scale fading, and spatial correlation synthesis.

Cells tile a square grid and, when wrap-around is enabled, distances
and angles live on the torus whose period is the grid extent, so no
cell sits at a topological edge.  Correlation matrices follow a local
scattering model: scatterers spread uniformly over a limited angular
interval around the nominal direction to the user.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz

CACHE_DIR_ENV = "MIMOFBL_CACHE_DIR"

# base order; the integrand swings through pi*(M-1)*spread radians at
# the largest lag, so wide apertures scale the rule up (roughly half a
# node per radian plus slack) to stay entrywise-accurate below 1e-8
_QUAD_ORDER = 200
_quad_rules: dict = {}


def _quad_rule(num_antennas: int, angular_spread: float):
    swing = math.pi * max(num_antennas - 1, 0) * angular_spread
    order = max(_QUAD_ORDER, 32 * math.ceil((0.5 * swing + 40.0) / 32.0))
    if order not in _quad_rules:
        _quad_rules[order] = np.polynomial.legendre.leggauss(order)
    return _quad_rules[order]

_PSD_TOL = 1e-10
_SQRT_CLIP = 1e-14


def pathloss_db(distance):
    """Large-scale channel gain in dB at the given distance in meters."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0.0):
        raise ValueError("distance must be positive")
    out = -35.3 - 37.6 * np.log10(d)
    return float(out) if np.isscalar(distance) else out


def wrapped_displacement(delta, period: float):
    """Reduce a displacement to its torus representative in [-P/2, P/2).

    Minimizing each coordinate independently also minimizes the
    Euclidean norm over all shifted images, so this single reduction
    replaces an explicit search over the 3x3 neighbor copies.
    """
    return (np.asarray(delta, dtype=np.float64) + 0.5 * period) % period \
        - 0.5 * period


@dataclass(frozen=True)
class NetworkGeometry:
    """Square grid of cells with base stations at the cell centers."""

    num_cells: int
    cell_side: float
    bs_positions: np.ndarray
    min_ue_distance: float = 5.0
    wrap_around: bool = True

    def __post_init__(self):
        side = math.isqrt(self.num_cells)
        if side * side != self.num_cells:
            raise ValueError(
                f"num_cells must be a perfect square, got {self.num_cells}")
        if not 0.0 < self.min_ue_distance < self.cell_side / 2.0:
            raise ValueError(
                "min_ue_distance must lie in (0, cell_side / 2)")
        pos = np.asarray(self.bs_positions, dtype=np.float64)
        if pos.shape != (self.num_cells, 2):
            raise ValueError(
                f"bs_positions must have shape ({self.num_cells}, 2)")
        object.__setattr__(self, "bs_positions", pos)

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.num_cells)

    @property
    def extent(self) -> float:
        """Torus period: the full width of the tiled area."""
        return self.grid_side * self.cell_side

    @classmethod
    def square_grid(cls, num_cells: int, cell_side: float,
                    min_ue_distance: float = 5.0,
                    wrap_around: bool = True) -> "NetworkGeometry":
        side = math.isqrt(num_cells)
        if side * side != num_cells:
            raise ValueError(
                f"num_cells must be a perfect square, got {num_cells}")
        centers = [((i + 0.5) * cell_side, (j + 0.5) * cell_side)
                   for j in range(side) for i in range(side)]
        return cls(num_cells=num_cells, cell_side=cell_side,
                   bs_positions=np.asarray(centers),
                   min_ue_distance=min_ue_distance, wrap_around=wrap_around)


@dataclass(frozen=True)
class UEPlacement:
    """Positions plus wrapped distance and angle to every base station.

    positions has shape (L, K, 2); distances and angles have shape
    (L, K, L) indexed as (serving cell, user, observing BS).
    """

    positions: np.ndarray
    distances: np.ndarray
    angles: np.ndarray

    @property
    def num_cells(self) -> int:
        return self.positions.shape[0]

    @property
    def users_per_cell(self) -> int:
        return self.positions.shape[1]


def place_ues(geometry: NetworkGeometry, users_per_cell: int,
              rng) -> UEPlacement:
    """Drop users uniformly in their cells, deterministically per rng.

    rng is either an integer seed or a numpy Generator.  Positions
    closer than geometry.min_ue_distance to the serving base station
    are rejection-sampled away.
    """
    if users_per_cell < 1:
        raise ValueError("users_per_cell must be >= 1")
    if isinstance(rng, (int, np.integer)):
        from .rng import substream
        rng = substream(int(rng), "ue-placement")

    half = geometry.cell_side / 2.0
    centers = geometry.bs_positions
    pos = rng.uniform(-half, half,
                      size=(geometry.num_cells, users_per_cell, 2))
    pos += centers[:, None, :]
    while True:
        own = np.linalg.norm(pos - centers[:, None, :], axis=-1)
        bad = own < geometry.min_ue_distance
        if not bad.any():
            break
        redraw = rng.uniform(-half, half, size=(int(bad.sum()), 2))
        cells = np.nonzero(bad)[0]
        pos[bad] = redraw + centers[cells]

    # displacement from each BS to each UE: (L, K, L_bs, 2)
    disp = pos[:, :, None, :] - centers[None, None, :, :]
    if geometry.wrap_around:
        disp = wrapped_displacement(disp, geometry.extent)
    distances = np.linalg.norm(disp, axis=-1)
    angles = np.arctan2(disp[..., 1], disp[..., 0])
    return UEPlacement(positions=pos, distances=distances, angles=angles)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Hermitian PSD spatial correlation with its generating parameters."""

    entries: np.ndarray
    large_scale: float
    angular_spread: float
    nominal_angle: float
    _sqrt: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def num_antennas(self) -> int:
        return self.entries.shape[0]

    def sqrt_factor(self) -> np.ndarray:
        """A matrix F with F F^H = entries, for channel synthesis.

        Eigenvalues below 1e-14 of the largest count as exact zeros,
        which keeps zero-spread (rank-1) matrices usable; anything
        meaningfully negative is a synthesis bug and raises.
        """
        if self._sqrt is not None:
            return self._sqrt
        vals, vecs = np.linalg.eigh(self.entries)
        floor = -_PSD_TOL * max(np.trace(self.entries).real, 0.0) \
            / self.entries.shape[0]
        if vals.min() < floor:
            raise np.linalg.LinAlgError(
                f"correlation matrix is not PSD: min eigenvalue {vals.min()}")
        vals = np.where(vals < _SQRT_CLIP * vals.max(), 0.0, vals)
        factor = vecs * np.sqrt(vals)
        object.__setattr__(self, "_sqrt", factor)
        return factor


def _validate_scattering_args(num_antennas, angular_spread, large_scale):
    if num_antennas < 1:
        raise ValueError("num_antennas must be >= 1")
    if not 0.0 <= angular_spread < math.pi / 2.0:
        raise ValueError("angular_spread must lie in [0, pi/2)")
    if large_scale <= 0.0:
        raise ValueError("large_scale must be positive")


def local_scattering_correlation(num_antennas: int, nominal_angle: float,
                                 angular_spread: float,
                                 large_scale: float) -> CorrelationMatrix:
    """Correlation of a half-wavelength array under local scattering.

    Entry (m1, m2) averages exp(j pi (m1 - m2) sin(angle)) over angles
    uniform in [nominal - spread, nominal + spread], scaled by the
    large-scale gain.  A Gauss-Legendre rule sized to the aperture
    evaluates the average; with nodes placed at nominal + spread * x
    the spread cancels from the weights, so zero spread degrades
    gracefully to the rank-1 steering outer product.
    """
    _validate_scattering_args(num_antennas, angular_spread, large_scale)
    nodes, weights = _quad_rule(num_antennas, angular_spread)
    sines = np.sin(nominal_angle + angular_spread * nodes)
    lags = np.arange(num_antennas)
    phases = np.exp(1j * math.pi * np.outer(lags, sines))
    col = (large_scale / 2.0) * (phases @ weights)
    col[0] = large_scale
    entries = toeplitz(col, col.conj())
    entries = 0.5 * (entries + entries.conj().T)
    _check_psd(entries)
    return CorrelationMatrix(entries=entries, large_scale=large_scale,
                             angular_spread=angular_spread,
                             nominal_angle=nominal_angle)


def uncorrelated_correlation(num_antennas: int,
                             large_scale: float) -> CorrelationMatrix:
    """Correlation of independent equal-power antennas."""
    _validate_scattering_args(num_antennas, 0.0, large_scale)
    entries = large_scale * np.eye(num_antennas, dtype=np.complex128)
    return CorrelationMatrix(entries=entries, large_scale=large_scale,
                             angular_spread=0.0, nominal_angle=0.0)


def _check_psd(entries: np.ndarray):
    # fail loudly instead of clipping: a meaningfully negative
    # eigenvalue means the quadrature or assembly is wrong
    vals = np.linalg.eigvalsh(entries)
    tol = _PSD_TOL * np.trace(entries).real / entries.shape[0]
    if vals.min() < -tol:
        raise ValueError(
            f"assembled correlation is not PSD: min eigenvalue {vals.min()}")


def draw_channel(correlation: CorrelationMatrix, rng,
                 size: int | None = None) -> np.ndarray:
    """Sample zero-mean complex Gaussian vectors with the given covariance."""
    factor = correlation.sqrt_factor()
    m = correlation.num_antennas
    shape = (m,) if size is None else (size, m)
    w = rng.standard_normal(shape + (2,)).view(np.complex128)[..., 0]
    w *= math.sqrt(0.5)
    return w @ factor.T


def correlation_cache_key(num_antennas: int, nominal_angle: float,
                          angular_spread: float, large_scale: float) -> str:
    raw = repr((int(num_antennas), float(nominal_angle),
                float(angular_spread), float(large_scale)))
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def cached_local_scattering(num_antennas: int, nominal_angle: float,
                            angular_spread: float, large_scale: float,
                            cache_dir: str | None = None) -> CorrelationMatrix:
    """local_scattering_correlation with an optional on-disk cache.

    cache_dir falls back to the MIMOFBL_CACHE_DIR environment variable;
    with neither set this is a plain synthesis call.  Cached entries
    store their key parameters and are ignored on mismatch.
    """
    directory = cache_dir if cache_dir is not None \
        else os.environ.get(CACHE_DIR_ENV)
    if directory is None:
        return local_scattering_correlation(
            num_antennas, nominal_angle, angular_spread, large_scale)

    key = correlation_cache_key(num_antennas, nominal_angle,
                                angular_spread, large_scale)
    path = os.path.join(directory, f"corr-{key}.npz")
    # the rule order participates so files from a differently sized
    # quadrature are recomputed instead of silently reused
    order = float(_quad_rule(num_antennas, angular_spread)[0].size)
    params = np.array([num_antennas, nominal_angle, angular_spread,
                       large_scale, order], dtype=np.float64)
    if os.path.exists(path):
        stored = np.load(path)
        if np.array_equal(stored["params"], params):
            return CorrelationMatrix(
                entries=stored["entries"], large_scale=float(large_scale),
                angular_spread=float(angular_spread),
                nominal_angle=float(nominal_angle))
    result = local_scattering_correlation(
        num_antennas, nominal_angle, angular_spread, large_scale)
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.{os.getpid()}.tmp.npz"
    np.savez(tmp, entries=result.entries, params=params)
    os.replace(tmp, path)
    return result
