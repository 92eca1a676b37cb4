"""Two-dimensional coupled-dipole channel model.

Every scatterer, RIS element and antenna is a point dipole with a Lorentzian
polarizability. The dipoles interact through the scalar 2D Green's function
``(j/4) H0^(2)(k d)`` with ``k = 2 pi f`` (natural units: c = 1, so the
wavelength at f = 1 is one length unit). The channel between two antennas is
an entry of the inverse interaction matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy import special

from .exceptions import DegenerateSceneError, InvalidArgumentError, SelfInteractionError

MIN_SEPARATION = 1e-6
RADIATION_DAMPING = 0.25


@dataclass(frozen=True)
class DipoleProperties:
    """Lorentzian parameters of one dipole.

    ``f_res`` is the resonance frequency, ``chi`` the oscillator strength and
    ``gamma_loss`` the absorption loss factor (all dimensionless).
    """

    f_res: float
    chi: float
    gamma_loss: float

    def __post_init__(self):
        vals = (self.f_res, self.chi, self.gamma_loss)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"non-finite dipole properties {vals}")
        if self.f_res <= 0 or self.chi <= 0 or self.gamma_loss < 0:
            raise InvalidArgumentError(
                f"need f_res > 0, chi > 0, gamma_loss >= 0; got {vals}")

    def to_dict(self):
        return {"f_res": self.f_res, "chi": self.chi, "gamma_loss": self.gamma_loss}


# Table of material parameters used for the default scenes.
TRANSCEIVER = DipoleProperties(f_res=1.0, chi=0.5, gamma_loss=0.0)
ENVIRONMENT = DipoleProperties(f_res=10.0, chi=50.0, gamma_loss=1e4)
RIS_ON = DipoleProperties(f_res=1.0, chi=0.2, gamma_loss=0.05)
RIS_OFF = DipoleProperties(f_res=5.0, chi=0.2, gamma_loss=0.05)


@dataclass(frozen=True)
class Dipole:
    position: tuple[float, float]
    properties: DipoleProperties
    kind: str  # one of DIPOLE_KINDS


DIPOLE_KINDS = ("antenna", "wall", "perturber", "ris")


@dataclass(frozen=True)
class FrequencyGrid:
    points: tuple[float, ...]
    target_index: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise InvalidArgumentError("frequency grid must be a nonempty 1D sequence")
        if not np.all(np.isfinite(pts)) or np.any(pts <= 0):
            raise InvalidArgumentError("grid frequencies must be finite and positive")
        if np.any(np.diff(pts) <= 0):
            raise InvalidArgumentError("grid frequencies must be strictly increasing")
        if not 0 <= self.target_index < pts.size:
            raise InvalidArgumentError(
                f"target_index {self.target_index} outside grid of {pts.size} points")
        object.__setattr__(self, "points", tuple(float(p) for p in pts))

    @classmethod
    def uniform(cls, f_min=0.9, f_max=1.1, n_freq=25, f_target=1.0):
        if n_freq == 1:
            pts = np.array([f_target], dtype=float)
        else:
            if not f_min < f_target < f_max:
                raise InvalidArgumentError("need f_min < f_target < f_max")
            pts = np.linspace(f_min, f_max, n_freq)
        target = int(np.argmin(np.abs(pts - f_target)))
        return cls(tuple(pts), target)

    @property
    def frequencies(self) -> np.ndarray:
        return np.asarray(self.points)

    @property
    def target_frequency(self) -> float:
        return self.points[self.target_index]

    def __len__(self):
        return len(self.points)


def inverse_polarizability(props: DipoleProperties, f) -> complex | np.ndarray:
    """Return ``1/alpha(f) = (f_res^2 - f^2)/chi + j (gamma_loss f / chi + 1/4)``.

    The constant 1/4 is the radiation-damping floor matching Im G(0) of the
    2D kernel, so a lossless dipole never amplifies.
    """
    f_arr = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f_arr)) or np.any(f_arr <= 0):
        raise InvalidArgumentError(f"frequency must be finite and > 0, got {f}")
    re = (props.f_res ** 2 - f_arr ** 2) / props.chi
    im = props.gamma_loss * f_arr / props.chi + RADIATION_DAMPING
    out = re + 1j * im
    return complex(out) if out.ndim == 0 else out


def bessel_j0_y0(x):
    """Bessel functions of the first and second kind, order zero.

    Accepts scalars or arrays. ``Y0`` is only defined for ``x > 0``.
    """
    x_arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x_arr)):
        raise InvalidArgumentError("bessel argument must be finite")
    if np.any(x_arr <= 0):
        raise InvalidArgumentError("Y0 is only defined for x > 0")
    j0, y0 = special.j0(x_arr), special.y0(x_arr)
    if x_arr.ndim == 0:
        return float(j0), float(y0)
    return j0, y0


def _hankel_kernel(kd: np.ndarray) -> np.ndarray:
    # (j/4) H0^(2)(kd) with H0^(2) = J0 - j Y0
    return 0.25 * special.y0(kd) + 0.25j * special.j0(kd)


def greens_2d(a, b, f: float) -> complex:
    """Scalar 2D Green's function between points ``a`` and ``b`` at frequency ``f``."""
    if not np.isfinite(f) or f <= 0:
        raise InvalidArgumentError(f"frequency must be finite and > 0, got {f}")
    d = float(np.hypot(a[0] - b[0], a[1] - b[1]))
    if d < MIN_SEPARATION:
        raise SelfInteractionError(f"points {tuple(a)} and {tuple(b)} coincide (d={d:g})")
    return complex(_hankel_kernel(np.array(2 * np.pi * f * d)))


def pairwise_distances(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    diff = pa[:, None, :] - pb[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def check_separation(positions: np.ndarray, min_sep: float = MIN_SEPARATION) -> None:
    """Raise :class:`SelfInteractionError` if any two positions are closer than ``min_sep``."""
    if len(positions) < 2:
        return
    d = pairwise_distances(positions, positions)
    np.fill_diagonal(d, np.inf)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    if d[i, j] < min_sep:
        raise SelfInteractionError(
            f"dipoles {min(i, j)} and {max(i, j)} are {d[i, j]:.3g} apart "
            f"(minimum separation {min_sep:g})")


def coupling_block(pa: np.ndarray, pb: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Off-diagonal interaction entries ``-G`` for every frequency.

    Returns an array of shape ``(n_freq, len(pa), len(pb))``. Callers must
    make sure no pair coincides.
    """
    d = pairwise_distances(pa, pb)
    kd = (2 * np.pi * np.asarray(freqs, dtype=float))[:, None, None] * d[None]
    return -_hankel_kernel(kd)


def assemble_interaction_matrix(instance, f: float) -> np.ndarray:
    """Dense symmetric interaction matrix ``W`` of a scene instance at frequency ``f``.

    ``W_ii`` is the inverse polarizability of dipole ``i``; ``W_ij = -G(r_i, r_j)``.
    """
    positions = instance.positions
    n = len(positions)
    if n < 2:
        raise InvalidArgumentError("an interaction matrix needs at least two dipoles")
    check_separation(positions)
    upper = np.triu_indices(n, 1)
    g = -_hankel_kernel(2 * np.pi * f * pairwise_distances(positions, positions)[upper])
    W = np.empty((n, n), dtype=complex)
    W[upper] = g
    W[upper[1], upper[0]] = g
    per_material = {p: inverse_polarizability(p, f) for p in set(instance.properties)}
    W[np.diag_indices(n)] = [per_material[p] for p in instance.properties]
    return W


def _factor(W: np.ndarray):
    if not np.all(np.isfinite(W)):
        raise DegenerateSceneError("interaction matrix has non-finite entries")
    lu, piv = scipy.linalg.lu_factor(W, check_finite=False)
    u_diag = np.abs(np.diag(lu))
    if np.min(u_diag) <= np.finfo(float).eps * np.max(u_diag) * len(W):
        raise DegenerateSceneError("interaction matrix is numerically singular")
    return lu, piv


def channel_spectrum(instance, grid: FrequencyGrid, tx: int, rx: int) -> np.ndarray:
    """Transmission ``H(f) = [W(f)^-1]_{rx,tx}`` for every grid frequency.

    ``tx`` and ``rx`` are dipole indices of two distinct antennas. Each
    frequency uses one LU factorization and one solve for the ``tx`` column.
    """
    n = len(instance.positions)
    for idx in (tx, rx):
        if not 0 <= idx < n or instance.kinds[idx] != "antenna":
            raise InvalidArgumentError(f"dipole {idx} is not an antenna of this instance")
    if tx == rx:
        raise InvalidArgumentError("tx and rx must be different antennas")
    out = np.empty(len(grid), dtype=complex)
    rhs = np.zeros(n, dtype=complex)
    rhs[tx] = 1.0
    for k, f in enumerate(grid.points):
        lu_piv = _factor(assemble_interaction_matrix(instance, f))
        out[k] = scipy.linalg.lu_solve(lu_piv, rhs, check_finite=False)[rx]
    if not np.all(np.isfinite(out)):
        raise DegenerateSceneError("channel spectrum is not finite")
    return out


def channel_dispersion(samples: Sequence[complex]) -> float:
    """Standard deviation of complex samples, ``sqrt(mean |h - mean h|^2)``."""
    h = np.asarray(samples, dtype=complex).ravel()
    if h.size < 2:
        raise InvalidArgumentError("channel_dispersion needs at least two samples")
    return float(np.sqrt(np.mean(np.abs(h - h.mean()) ** 2)))
