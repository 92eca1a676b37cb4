"""Sense the perturbers, then pick a RIS configuration with the channel surrogate.

Two estimators follow the scikit-learn API:

* :class:`SensingModel` maps auxiliary-channel probe spectra to an angle
  estimate (``fit(measurements, theta)`` / ``predict``).
* :class:`ChannelModel` maps ``(C, theta)`` to the predicted TX to RX spectrum
  (``fit(X, spectra)`` / ``predict``), where each row of ``X`` holds the 25
  configuration bits followed by ``theta``.

:func:`optimize_config` searches configurations by greedy single-bit flips
scored by the surrogate, and :func:`evaluate_instance` scores the result
against the ground-truth simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import neuralnet
from .dataset import ProbeSet, record_rng
from .exceptions import InvalidArgumentError, ProbeMismatchError
from .neuralnet import Mlp, TrainConfig
from .physics import FrequencyGrid
from .scene import (PerturberState, RisConfiguration, SceneSpec, arc_length_distance,
                    canonical_angle, random_config)
from .simulator import ChannelSimulator

FEATURE_MODES = ("complex", "magnitude")
SENSING_LOSSES = ("embedding", "arc")


class _NetEstimator(BaseEstimator):
    """Shared training hyperparameters of the two networks."""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.beta1, self.beta2,
                           self.epsilon, self.max_epochs, self.patience, self.val_fraction,
                           int(self.random_state))

    def _initial_net(self, n_in: int, n_out: int) -> Mlp:
        sizes = (n_in, *self.hidden_layer_sizes, n_out)
        return neuralnet.init_mlp(sizes, np.random.SeedSequence([int(self.random_state), 1]))


# ---------------------------------------------------------------------------
# Channel surrogate


def encode_channel_inputs(bits, theta) -> np.ndarray:
    """Bits as +-1 followed by ``(cos theta, sin theta)``."""
    bits = np.atleast_2d(np.asarray(bits, dtype=float))
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (len(bits),))
    return np.column_stack([2.0 * bits - 1.0, np.cos(theta), np.sin(theta)])


def spectra_to_reals(spectra) -> np.ndarray:
    h = np.atleast_2d(np.asarray(spectra, dtype=complex))
    return np.stack([h.real, h.imag], axis=-1).reshape(len(h), -1)


def reals_to_spectra(y) -> np.ndarray:
    y = np.atleast_2d(y)
    return y[:, 0::2] + 1j * y[:, 1::2]


class ChannelModel(RegressorMixin, _NetEstimator):
    """Surrogate forward model ``(C, theta) -> H_RX-TX(f)``.

    Parameters
    ----------
    target_index : int
        Grid index at which :meth:`predict_rssi` reads the spectrum.
    hidden_layer_sizes : tuple of int, default (64, 64)
    batch_size, learning_rate, beta1, beta2, epsilon, max_epochs, patience,
    val_fraction, random_state
        Adam and early-stopping settings.
    """

    def __init__(self, target_index=12, hidden_layer_sizes=(64, 64), batch_size=64,
                 learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 max_epochs=2000, patience=20, val_fraction=0.15, random_state=0):
        self.target_index = target_index
        self.hidden_layer_sizes = hidden_layer_sizes
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        """``X``: rows of ``n_bits`` bits then theta; ``y``: complex spectra."""
        X = check_array(X, dtype=np.float64)
        Y = spectra_to_reals(y)
        if len(Y) != len(X):
            raise InvalidArgumentError("X and y have different numbers of rows")
        inputs = encode_channel_inputs(X[:, :-1], X[:, -1])
        net = self._initial_net(inputs.shape[1], Y.shape[1])
        self.net_, self.report_ = neuralnet.train(net, inputs, Y, self._train_config())
        self._check_target()
        return self

    @classmethod
    def from_net(cls, net: Mlp, target_index: int, **params) -> "ChannelModel":
        model = cls(target_index=target_index,
                    hidden_layer_sizes=tuple(net.layer_sizes[1:-1]), **params)
        model.net_ = net
        model._check_target()
        return model

    def _check_target(self):
        n_freq = self.net_.n_outputs // 2
        if not 0 <= self.target_index < n_freq:
            raise InvalidArgumentError(
                f"target_index {self.target_index} outside the {n_freq}-point spectrum")

    @property
    def n_bits(self) -> int:
        return self.net_.n_inputs - 2

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return reals_to_spectra(neuralnet.forward(self.net_, encode_channel_inputs(X[:, :-1], X[:, -1])))

    def predict_rssi_batch(self, bits, theta, target_index=None) -> np.ndarray:
        """``|H(f_target)|`` for each row of ``bits`` at angle ``theta``."""
        check_is_fitted(self, "net_")
        k = self.target_index if target_index is None else target_index
        if not 0 <= k < self.net_.n_outputs // 2:
            raise InvalidArgumentError(f"target index {k} out of range")
        bits = np.atleast_2d(bits)
        if bits.shape[1] != self.n_bits:
            raise InvalidArgumentError(f"expected {self.n_bits} bits, got {bits.shape[1]}")
        y = neuralnet.forward(self.net_, encode_channel_inputs(bits, theta))
        return np.hypot(y[:, 2 * k], y[:, 2 * k + 1])

    def score(self, X, y, sample_weight=None):
        """Coefficient of determination over the real and imaginary parts."""
        from sklearn.metrics import r2_score
        return r2_score(spectra_to_reals(y), spectra_to_reals(self.predict(X)),
                        sample_weight=sample_weight)


def predict_rssi(model: ChannelModel, c: RisConfiguration, theta, target_index: int) -> float:
    theta = theta.theta if isinstance(theta, PerturberState) else theta
    return float(model.predict_rssi_batch(c.as_array(), theta, target_index)[0])


# ---------------------------------------------------------------------------
# Perturber sensing


def sensing_features(measurements, mode: str = "complex") -> np.ndarray:
    """Flatten ``(n, n_probes, n_freq)`` complex spectra into feature rows."""
    m = np.asarray(measurements, dtype=complex)
    if m.ndim == 2:
        m = m[None]
    if mode == "complex":
        return np.stack([m.real, m.imag], axis=-1).reshape(len(m), -1)
    if mode == "magnitude":
        return np.abs(m).reshape(len(m), -1)
    raise InvalidArgumentError(f"feature_mode must be one of {FEATURE_MODES}, got {mode!r}")


class SensingModel(RegressorMixin, _NetEstimator):
    """Perturber-angle estimator from auxiliary-channel probe spectra.

    The network regresses ``(cos theta, sin theta)``; :meth:`predict` returns
    ``atan2`` of the output mapped to ``[0, 2 pi)``.

    Parameters
    ----------
    probes : ProbeSet
        Configurations under which measurements are taken, in order.
    feature_mode : {"complex", "magnitude"}
    loss : {"embedding", "arc"}
        ``"embedding"`` is MSE on the circle embedding, ``"arc"`` the mean
        squared arc-length error.
    """

    def __init__(self, probes: ProbeSet | None = None, feature_mode="complex", loss="embedding",
                 hidden_layer_sizes=(256, 128, 26), batch_size=64, learning_rate=1e-3,
                 beta1=0.9, beta2=0.999, epsilon=1e-8, max_epochs=2000, patience=20,
                 val_fraction=0.15, random_state=0):
        self.probes = probes
        self.feature_mode = feature_mode
        self.loss = loss
        self.hidden_layer_sizes = hidden_layer_sizes
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=complex)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise InvalidArgumentError("measurements must have shape (n, n_probes, n_freq)")
        if self.probes is not None and X.shape[1] != len(self.probes):
            raise InvalidArgumentError(
                f"expected {len(self.probes)} probe spectra per sample, got {X.shape[1]}")
        feats = sensing_features(X, self.feature_mode)
        if hasattr(self, "net_") and feats.shape[1] != self.net_.n_inputs:
            raise InvalidArgumentError(
                f"measurement size {feats.shape[1]} does not match the model input "
                f"{self.net_.n_inputs}")
        return feats

    def _loss_name(self) -> str:
        if self.loss not in SENSING_LOSSES:
            raise InvalidArgumentError(f"loss must be one of {SENSING_LOSSES}")
        return "mse" if self.loss == "embedding" else "arc"

    def fit(self, X, y):
        """``X``: complex measurements ``(n, n_probes, n_freq)``; ``y``: angles."""
        feats = self._features(X)
        theta = np.asarray(y, dtype=float).ravel()
        target = np.column_stack([np.cos(theta), np.sin(theta)])
        net = self._initial_net(feats.shape[1], 2)
        self.net_, self.report_ = neuralnet.train(net, feats, target, self._train_config(),
                                                  self._loss_name())
        return self

    def initialize(self, X, y=None):
        """Random-weight model with normalization statistics from the training split."""
        feats = self._features(X)
        rng = np.random.default_rng(int(self.random_state))
        tr, _ = neuralnet.split_indices(len(feats), self.val_fraction, rng)
        net = self._initial_net(feats.shape[1], 2)
        mean, std = neuralnet.feature_stats(feats[tr])
        self.net_ = neuralnet.with_stats(net, in_mean=mean, in_std=std)
        return self

    @classmethod
    def from_net(cls, net: Mlp, probes: ProbeSet, feature_mode="complex", **params):
        model = cls(probes=probes, feature_mode=feature_mode,
                    hidden_layer_sizes=tuple(net.layer_sizes[1:-1]), **params)
        if net.n_outputs != 2:
            raise InvalidArgumentError("sensing networks must have two outputs")
        model.net_ = net
        return model

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        out = neuralnet.forward(self.net_, self._features(X))
        return canonical_angle(np.arctan2(out[:, 1], out[:, 0]))

    def score(self, X, y, sample_weight=None):
        """Negative mean arc-length error (higher is better)."""
        err = arc_length_distance(self.predict(X), np.asarray(y, dtype=float))
        return -float(np.average(err, weights=sample_weight))


def sense(model: SensingModel, measurements) -> PerturberState:
    """Estimate the perturber state from one set of probe measurements."""
    m = np.asarray(measurements, dtype=complex)
    if model.probes is not None and len(m) != len(model.probes):
        raise InvalidArgumentError(
            f"got {len(m)} measurements for {len(model.probes)} probe configurations")
    return PerturberState(float(model.predict(m[None])[0]))


def check_probes(model: SensingModel, probes: ProbeSet) -> None:
    """Refuse to use ``model`` with a probe set other than the one it was trained on."""
    if model.probes is None or model.probes != probes:
        raise ProbeMismatchError(
            f"sensing model was trained with probe seed "
            f"{getattr(model.probes, 'seed', None)}, measurements use probe seed {probes.seed}")


# ---------------------------------------------------------------------------
# Configuration search


@dataclass(frozen=True)
class OptimizeParams:
    n_restarts: int = 50
    max_sweeps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_restarts < 1 or self.max_sweeps < 1:
            raise InvalidArgumentError("n_restarts and max_sweeps must be >= 1")


@dataclass
class OptimizeResult:
    config: RisConfiguration
    value: float
    initial_value: float
    flips_accepted: int
    sweeps: int
    converged: bool
    trace: list = field(default_factory=list)  # objective after each accepted flip


def coordinate_ascent(objective, n_bits: int, params: OptimizeParams, free=None,
                      base=None) -> OptimizeResult:
    """Greedy single-bit ascent with screened random starts.

    ``objective`` maps a ``(k, n_bits)`` 0/1 array to ``k`` scores. Bits not in
    ``free`` stay at their value in ``base``.
    """
    rng = np.random.default_rng(params.seed)
    free = np.arange(n_bits) if free is None else np.asarray(sorted(free), dtype=int)
    base = np.zeros(n_bits, dtype=np.uint8) if base is None else np.asarray(base, dtype=np.uint8)

    starts = np.repeat(base[None], params.n_restarts, axis=0)
    starts[:, free] = rng.integers(0, 2, size=(params.n_restarts, len(free)))
    scores = np.asarray(objective(starts), dtype=float)
    best = int(np.argmax(scores))
    current, value = starts[best].copy(), float(scores[best])
    initial = value

    flips, sweeps, converged, trace = 0, 0, False, []
    for _ in range(params.max_sweeps):
        sweeps += 1
        changed = False
        for i in rng.permutation(free):
            trial = current.copy()
            trial[i] ^= 1
            v = float(objective(trial[None])[0])
            if v > value:
                current, value = trial, v
                flips += 1
                changed = True
                trace.append(v)
        if not changed:
            converged = True
            break
    return OptimizeResult(RisConfiguration(tuple(current)), value, initial, flips, sweeps,
                          converged, trace)


def optimize_config(model: ChannelModel, theta, params: OptimizeParams = OptimizeParams(),
                    free=None, base=None) -> OptimizeResult:
    """Search for the configuration with the highest surrogate RSSI at ``theta``."""
    theta = theta.theta if isinstance(theta, PerturberState) else float(theta)
    return coordinate_ascent(lambda B: model.predict_rssi_batch(B, theta),
                             model.n_bits, params, free, base)


# ---------------------------------------------------------------------------
# Ground-truth evaluation


def _simulator(spec_or_sim, grid) -> ChannelSimulator:
    if isinstance(spec_or_sim, ChannelSimulator):
        return spec_or_sim
    if isinstance(spec_or_sim, SceneSpec):
        return ChannelSimulator(spec_or_sim, grid)
    raise InvalidArgumentError("expected a SceneSpec or ChannelSimulator")


def baseline_configs(n: int, seed: int, n_bits: int = 25) -> list[RisConfiguration]:
    rng = record_rng(seed, 0)
    return [random_config(rng, n_bits) for _ in range(n)]


def evaluate_instance(spec, grid: FrequencyGrid, theta_true, c_opt: RisConfiguration,
                      n_baseline: int, seed: int, baselines=None) -> dict:
    """Ground-truth RSSI of ``c_opt`` versus ``n_baseline`` random configurations."""
    if n_baseline < 1:
        raise InvalidArgumentError("n_baseline must be >= 1")
    sim = _simulator(spec, grid)
    theta = theta_true.theta if isinstance(theta_true, PerturberState) else float(theta_true)
    target = sim.grid.target_index
    state = sim.theta_state(theta, [target])
    if baselines is None:
        baselines = baseline_configs(n_baseline, seed, sim.spec.n_bits)
    rssi_opt = sim.rssi(state, c_opt)
    random_rssi = np.array([sim.rssi(state, c) for c in baselines[:n_baseline]])
    mean = float(random_rssi.mean())
    return {"rssi_opt": rssi_opt, "rssi_random_mean": mean,
            "rssi_random_max": float(random_rssi.max()), "ratio": rssi_opt / mean}


def run_instance(sim: ChannelSimulator, sensor: SensingModel, surrogate: ChannelModel,
                 index: int, seed: int, n_baseline: int, params: OptimizeParams) -> dict:
    """One coherence-time cycle: sense, optimize, evaluate against the simulator."""
    from .dataset import record_seed, simulate_probes

    inst_seed = record_seed(seed, index)
    rng = np.random.default_rng(inst_seed)
    theta_true = canonical_angle(rng.uniform(0.0, 2 * np.pi))
    measurements = simulate_probes(sim, sensor.probes, theta_true)
    theta_est = sense(sensor, measurements).theta
    opt_params = OptimizeParams(params.n_restarts, params.max_sweeps,
                                record_seed(inst_seed, 1))
    result = optimize_config(surrogate, theta_est, opt_params)
    ev = evaluate_instance(sim, sim.grid, theta_true, result.config, n_baseline,
                           record_seed(inst_seed, 2))
    return {
        "index": index,
        "theta_true": theta_true,
        "theta_est": theta_est,
        "arc_error": arc_length_distance(theta_est, theta_true),
        **ev,
        "rssi_predicted": result.value,
        "flips_accepted": result.flips_accepted,
        "sweeps": result.sweeps,
        "config": list(result.config.bits),
    }


def summarize(entries: list[dict]) -> dict:
    ratios = np.array([e["ratio"] for e in entries])
    arc = np.array([e["arc_error"] for e in entries])
    return {
        "n_instances": len(entries),
        "mean_ratio": float(ratios.mean()),
        "min_ratio": float(ratios.min()),
        "max_ratio": float(ratios.max()),
        "fraction_improved": float(np.mean(ratios > 1.0)),
        "mean_arc_error": float(arc.mean()),
        "max_arc_error": float(arc.max()),
        "mean_rssi_opt": float(np.mean([e["rssi_opt"] for e in entries])),
        "mean_rssi_random": float(np.mean([e["rssi_random_mean"] for e in entries])),
    }
