"""Synthetic nonlinear tube stage used as the modeling ground truth.

The stage is gain -> DC-blocking high-pass -> tanh waveshaper with a slow
feedback bias (asymmetric clipping, long memory) -> one-pole lowpass. All
pole coefficients sit strictly below 1 so each linear sub-block is stable.
Also provides the transient-length analysis used to size a model's
receptive field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, DomainError, SteadyStateError
from .signal import AudioBuffer


@dataclass(frozen=True)
class TubeStageConfig:
    """Tube-stage coefficients; defaults give a ~0.2 s settling transient."""

    hp_coeff: float = 0.9995
    bias_coeff: float = 0.9995
    lp_coeff: float = 0.6
    bias_depth: float = 0.5
    min_gain_db: float = -6.0
    max_gain_db: float = 30.0

    def __post_init__(self):
        if not 0.0 < self.hp_coeff < 1.0:
            raise ConfigError(f"hp_coeff must be in (0,1), got {self.hp_coeff}")
        if not 0.0 < self.bias_coeff < 1.0:
            raise ConfigError(f"bias_coeff must be in (0,1), got {self.bias_coeff}")
        if not 0.0 <= self.lp_coeff < 1.0:
            raise ConfigError(f"lp_coeff must be in [0,1), got {self.lp_coeff}")
        if self.bias_depth < 0.0:
            raise ConfigError(f"bias_depth must be >= 0, got {self.bias_depth}")
        if not self.min_gain_db < self.max_gain_db:
            raise ConfigError("min_gain_db must be below max_gain_db")

    def gain_linear(self, control: float) -> float:
        """Map control in [0,1] linearly in dB onto [min_gain_db, max_gain_db]."""
        db = self.min_gain_db + control * (self.max_gain_db - self.min_gain_db)
        return 10.0 ** (db / 20.0)

    def to_dict(self) -> dict:
        return {
            "hp_coeff": self.hp_coeff,
            "bias_coeff": self.bias_coeff,
            "lp_coeff": self.lp_coeff,
            "bias_depth": self.bias_depth,
            "min_gain_db": self.min_gain_db,
            "max_gain_db": self.max_gain_db,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TubeStageConfig":
        return cls(**d)


@dataclass
class TubeStageState:
    """Per-stream recursion state; zeros mean the device starts at rest."""

    u_prev: float = 0.0
    v_prev: float = 0.0
    b_prev: float = 0.0
    y_prev: float = 0.0


@njit(cache=True)
def _tube_kernel(x, g, hp, bias_c, lp, depth, state):
    u_prev, v_prev, b_prev, y_prev = state[0], state[1], state[2], state[3]
    y = np.empty_like(x)
    for n in range(x.shape[0]):
        u = g * x[n]
        v = u - u_prev + hp * v_prev
        w = np.tanh(v - depth * b_prev)
        b = bias_c * b_prev + (1.0 - bias_c) * w
        y[n] = (1.0 - lp) * w + lp * y_prev
        u_prev, v_prev, b_prev, y_prev = u, v, b, y[n]
    state[0], state[1], state[2], state[3] = u_prev, v_prev, b_prev, y_prev
    return y


def process(config: TubeStageConfig, state: TubeStageState, x: AudioBuffer, control: float) -> AudioBuffer:
    """Run the tube stage over a buffer, updating state in place.

    Consecutive calls with a shared state are seamless: chunked processing
    equals whole-buffer processing bit-exactly.
    """
    if not 0.0 <= control <= 1.0:
        raise DomainError(f"control must be in [0,1], got {control}")
    packed = np.array([state.u_prev, state.v_prev, state.b_prev, state.y_prev], dtype=np.float64)
    y = _tube_kernel(
        x.samples,
        config.gain_linear(control),
        config.hp_coeff,
        config.bias_coeff,
        config.lp_coeff,
        config.bias_depth,
        packed,
    )
    state.u_prev, state.v_prev, state.b_prev, state.y_prev = (
        float(packed[0]),
        float(packed[1]),
        float(packed[2]),
        float(packed[3]),
    )
    return AudioBuffer(y, x.sample_rate_hz)


def analyze_transient(
    output: AudioBuffer,
    probe_freq_hz: float,
    threshold: float,
    sample_rate_hz: int | None = None,
) -> int:
    """Estimate the transient length of a device driven by a pure-tone probe.

    The last full probe period of the output is taken as the steady-state
    template and tiled backwards over the whole signal; the transient is the
    residual. Returns the smallest n0 such that |transient[n]| stays below
    threshold * max|transient| for all n >= n0.
    """
    fs = sample_rate_hz if sample_rate_hz is not None else output.sample_rate_hz
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must be in (0,1), got {threshold}")
    period = fs / probe_freq_hz
    period_n = int(round(period))
    if period_n < 2 or abs(period - period_n) > 0.01:
        raise DomainError(
            f"probe period {period:.3f} samples is not close enough to an integer"
        )
    y = output.samples
    n_total = y.shape[0]
    if n_total < 2 * fs:
        raise DomainError("output must cover at least 2 s")
    if n_total < 20 * period_n:
        raise DomainError("output must cover at least 20 probe periods")

    template = y[n_total - period_n :]
    # Template phase-aligned to the probe: index (n - start) mod period.
    start = n_total - period_n
    idx = (np.arange(n_total) - start) % period_n
    tiled = template[idx]

    # Steady-state sanity over the final 10 periods (excluding the template
    # period itself, which matches trivially).
    tail = slice(n_total - 10 * period_n, n_total)
    tail_energy = float(np.sum(y[tail] ** 2))
    mismatch = float(np.sum((y[tail] - tiled[tail]) ** 2))
    if tail_energy == 0.0 or mismatch > 0.05 * tail_energy:
        raise SteadyStateError(
            f"output is not periodic at the probe frequency (mismatch {mismatch:.3e} "
            f"vs energy {tail_energy:.3e})"
        )

    transient = np.abs(y - tiled)
    peak = float(transient.max())
    # Below numerical noise the device is effectively memoryless.
    noise_floor = 1e-9 * max(float(np.abs(y).max()), 1e-30)
    if peak <= noise_floor:
        return 0
    above = np.nonzero(transient >= threshold * peak)[0]
    return int(above[-1]) + 1 if above.size else 0
