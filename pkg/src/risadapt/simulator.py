"""Fast evaluation of scene channels by block elimination.

Walls and antennas never move, so their block of the interaction matrix is
inverted once per frequency. For a given perturber angle the perturbers are
eliminated as well, leaving a 100 x 100 system over the RIS elements whose
diagonal is the only thing a RIS configuration changes. The results equal
:func:`risadapt.physics.channel_spectrum` up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import physics
from .exceptions import DegenerateSceneError, InvalidArgumentError
from .scene import ANTENNA_NAMES, RisConfiguration, SceneSpec, canonical_angle

_ANT = {name: i for i, name in enumerate(ANTENNA_NAMES)}


def _transpose(a):
    return np.ascontiguousarray(np.swapaxes(a, 1, 2))


def _solve(a, b):
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSceneError(f"singular interaction matrix: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise DegenerateSceneError("non-finite solution of the interaction system")
    return x


@dataclass(frozen=True)
class ThetaState:
    """Scene reduced onto the RIS elements for one perturber angle."""

    theta: float
    freq_index: np.ndarray
    reduced: np.ndarray  # (n_f, n_ris, n_ris), RIS self-terms excluded
    antenna_vectors: np.ndarray  # (n_f, 3, n_ris)
    base: np.ndarray  # (n_f, 3, 3), channel with all RIS couplings folded out


class ChannelSimulator:
    """Channel evaluator for one scene and frequency grid.

    Parameters
    ----------
    spec : SceneSpec
    grid : FrequencyGrid
    """

    def __init__(self, spec: SceneSpec, grid: physics.FrequencyGrid):
        self.spec = spec
        self.grid = grid
        f = grid.frequencies
        self._freqs = f
        static = np.concatenate([spec.wall_positions, spec.antenna_positions()])
        self._static = static
        self._n_walls = len(spec.wall_positions)
        ris = spec.ris_element_positions
        physics.check_separation(np.concatenate([static, ris]))

        W_AA = physics.coupling_block(static, static, f)
        diag = np.concatenate([
            np.repeat(physics.inverse_polarizability(spec.materials["wall"], f)[:, None],
                      self._n_walls, axis=1),
            np.repeat(physics.inverse_polarizability(spec.materials["antenna"], f)[:, None],
                      len(ANTENNA_NAMES), axis=1)], axis=1)
        idx = np.arange(len(static))
        W_AA[:, idx, idx] = diag
        try:
            self._A_inv = np.linalg.inv(W_AA)
        except np.linalg.LinAlgError as exc:
            raise DegenerateSceneError(f"singular wall/antenna block: {exc}") from exc

        W_AR = physics.coupling_block(static, ris, f)
        self._T_AR = self._A_inv @ W_AR
        W_RR = physics.coupling_block(ris, ris, f)
        r = np.arange(len(ris))
        W_RR[:, r, r] = 0.0
        self._S_RR = W_RR - np.swapaxes(W_AR, 1, 2) @ self._T_AR
        self._ant = self._n_walls + np.arange(len(ANTENNA_NAMES))
        self._diag_on = physics.inverse_polarizability(spec.ris_on, f)
        self._diag_off = physics.inverse_polarizability(spec.ris_off, f)
        self._pert_diag = physics.inverse_polarizability(spec.materials["perturber"], f)
        self._element_map = spec.macropixel_map

    def theta_state(self, theta: float, freq_index=None) -> ThetaState:
        """Fold walls, antennas and perturbers (at angle ``theta``) into a RIS-only system."""
        theta = canonical_angle(theta)
        if freq_index is None:
            fi = slice(None)
            freq_ids = np.arange(len(self._freqs))
        else:
            fi = freq_ids = np.atleast_1d(freq_index)
        f = self._freqs[fi]
        A_inv, T_AR, S_RR = self._A_inv[fi], self._T_AR[fi], self._S_RR[fi]
        pert = self.spec.perturber_positions(theta)
        ris = self.spec.ris_element_positions
        physics.check_separation(np.concatenate([self._static, pert, ris]))

        W_AP = physics.coupling_block(self._static, pert, f)
        W_PA = _transpose(W_AP)
        W_RP = physics.coupling_block(ris, pert, f)
        W_PP = physics.coupling_block(pert, pert, f)
        p = np.arange(len(pert))
        W_PP[:, p, p] = self._pert_diag[fi][:, None]

        T_AP = A_inv @ W_AP
        S_PP = W_PP - W_PA @ T_AP
        S_PR = _transpose(W_RP) - W_PA @ T_AR
        u_P = _transpose(T_AP[:, self._ant, :])  # (n_f, n_p, 3)
        X = _solve(S_PP, np.concatenate([S_PR, u_P], axis=2))
        n_ris = ris.shape[0]
        X_R, X_a = np.ascontiguousarray(X[:, :, :n_ris]), np.ascontiguousarray(X[:, :, n_ris:])
        S_RP = _transpose(S_PR)
        reduced = S_RR - S_RP @ X_R
        vectors = T_AR[:, self._ant, :] - _transpose(S_RP @ X_a)
        base = A_inv[:, self._ant][:, :, self._ant] + _transpose(u_P) @ X_a
        fi = freq_ids
        return ThetaState(theta, fi, reduced, vectors, base)

    def ris_diagonal(self, config: RisConfiguration, freq_index) -> np.ndarray:
        if len(config) != self.spec.n_bits:
            raise InvalidArgumentError(
                f"configuration has {len(config)} bits, scene expects {self.spec.n_bits}")
        on = config.expand(self._element_map).astype(bool)
        return np.where(on[None, :], self._diag_on[freq_index][:, None],
                        self._diag_off[freq_index][:, None])

    def channels(self, state: ThetaState, config: RisConfiguration, tx="tx", rx=("rx",)):
        """Channels from ``tx`` to each antenna in ``rx``; shape ``(len(rx), n_f)``."""
        if isinstance(rx, str):
            rx = (rx,)
        t = _ANT[tx]
        rs = [_ANT[r] for r in rx]
        if t in rs:
            raise InvalidArgumentError("tx and rx must be different antennas")
        K = state.reduced.copy()
        r = np.arange(K.shape[-1])
        K[:, r, r] += self.ris_diagonal(config, state.freq_index)
        y = _solve(K, state.antenna_vectors[:, t, :, None])[..., 0]
        v = state.antenna_vectors[:, rs, :]  # (n_f, n_rx, n_ris)
        h = state.base[:, rs, t] + np.einsum("fri,fi->fr", v, y)
        return h.T

    def spectrum(self, config: RisConfiguration, theta: float, tx="tx", rx="rx") -> np.ndarray:
        """Full-grid channel spectrum for ``(config, theta)``."""
        return self.channels(self.theta_state(theta), config, tx, (rx,))[0]

    def rssi(self, state: ThetaState, config: RisConfiguration, target: int = 0,
             tx="tx", rx="rx") -> float:
        """``|H|`` at position ``target`` of the state's frequency subset."""
        return float(np.abs(self.channels(state, config, tx, (rx,))[0, target]))
