"""Sample-by-sample and block-wise inference with per-layer ring buffers.

Each dilated layer keeps the last (width-1)*dilation post-residual
activations in a ring, so one output sample costs a fixed amount of work
regardless of elapsed time. Block processing runs the identical per-sample
kernel, so chunked and whole-signal processing agree bit-exactly for a
given precision. Single precision is the default streaming mode; double is
available for verification against the batch path.
"""

from __future__ import annotations

import json
import math
import platform
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, DomainError, NumericsError, ShapeError
from .models import (
    MlpConfig,
    MlpParams,
    WaveNetConfig,
    WaveNetParams,
    mlp_forward_signal,
    wavenet_process_signal,
)
from .signal import AudioBuffer

_DTYPES = {"single": np.float32, "double": np.float64}


@njit(cache=True)
def _sigmoid(a):
    if a >= 0.0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


@njit(cache=True)
def _wavenet_stream_kernel(
    x,
    cond,
    out,
    w_in,
    b_in,
    wfg,
    b_fg,
    v_fg,
    w_res,
    b_res,
    w_p1,
    b_p1,
    w_p2,
    b_p2,
    w_out,
    b_out,
    dil,
    ring,
    ring_off,
    pos,
    sum_skip,
    xcat,
    acc,
    z,
    skip,
    p1,
    p2,
    xcur,
    xnew,
):
    n_layers, two_c, wc = wfg.shape
    c = two_c // 2
    width = wc // c
    n_post = w_p2.shape[0]
    n_skip = skip.shape[0]
    cond_dim = cond.shape[0]
    for n in range(x.shape[0]):
        xn = x[n]
        for i in range(c):
            xcur[i] = w_in[i] * xn + b_in[i]
        if sum_skip:
            for s in range(n_skip):
                skip[s] = 0.0
        for k in range(n_layers):
            d = dil[k]
            cap = (width - 1) * d
            off = ring_off[k]
            for t in range(width - 1):
                idx = pos[k] - (width - 1 - t) * d
                if idx < 0:
                    idx += cap
                for i in range(c):
                    xcat[t * c + i] = ring[off + idx, i]
            for i in range(c):
                xcat[(width - 1) * c + i] = xcur[i]
            for o in range(two_c):
                a = b_fg[k, o]
                for j in range(wc):
                    a += wfg[k, o, j] * xcat[j]
                for j in range(cond_dim):
                    a += v_fg[k, o, j] * cond[j, n]
                acc[o] = a
            for i in range(c):
                z[i] = math.tanh(acc[i]) * _sigmoid(acc[c + i])
            if sum_skip:
                for i in range(c):
                    skip[i] += z[i]
            else:
                for i in range(c):
                    skip[k * c + i] = z[i]
            for o in range(c):
                a = b_res[k, o]
                for i in range(c):
                    a += w_res[k, o, i] * z[i]
                xnew[o] = xcur[o] + a
            if cap > 0:
                for i in range(c):
                    ring[off + pos[k], i] = xcur[i]
                nxt = pos[k] + 1
                pos[k] = 0 if nxt == cap else nxt
            for i in range(c):
                xcur[i] = xnew[i]
        for o in range(n_post):
            a = b_p1[o]
            g = b_p1[n_post + o]
            for j in range(n_skip):
                a += w_p1[o, j] * skip[j]
                g += w_p1[n_post + o, j] * skip[j]
            p1[o] = math.tanh(a) * _sigmoid(g)
        for o in range(n_post):
            a = b_p2[o]
            for j in range(n_post):
                a += w_p2[o, j] * p1[j]
            p2[o] = math.tanh(a)
        a = b_out[0]
        for j in range(n_post):
            a += w_out[j] * p2[j]
        out[n] = a


@njit(cache=True)
def _mlp_stream_kernel(
    x,
    cond,
    out,
    w_first,
    b_first,
    v_first,
    w_hidden,
    b_hidden,
    v_hidden,
    w_out,
    b_out,
    ring,
    pos_arr,
    window,
    h_a,
    h_b,
):
    input_size = window.shape[0]
    units = w_first.shape[0]
    n_hidden = w_hidden.shape[0]
    cond_dim = cond.shape[0]
    cap = input_size - 1
    pos = pos_arr[0]
    for n in range(x.shape[0]):
        for j in range(cap):
            idx = pos - cap + j
            if idx < 0:
                idx += cap
            window[j] = ring[idx]
        window[cap] = x[n]
        for o in range(units):
            a = b_first[o]
            for j in range(input_size):
                a += w_first[o, j] * window[j]
            for j in range(cond_dim):
                a += v_first[o, j] * cond[j, n]
            h_a[o] = math.tanh(a)
        for layer in range(n_hidden):
            for o in range(units):
                a = b_hidden[layer, o]
                for j in range(units):
                    a += w_hidden[layer, o, j] * h_a[j]
                for j in range(cond_dim):
                    a += v_hidden[layer, o, j] * cond[j, n]
                h_b[o] = math.tanh(a)
            for o in range(units):
                h_a[o] = h_b[o]
        a = b_out[0]
        for j in range(units):
            a += w_out[j] * h_a[j]
        out[n] = a
        if cap > 0:
            ring[pos] = x[n]
            pos += 1
            if pos == cap:
                pos = 0
    pos_arr[0] = pos


@dataclass
class WaveNetStreamState:
    """Packed weights plus per-layer dilation rings; one state per stream."""

    config: WaveNetConfig
    dtype: object
    w_in: np.ndarray
    b_in: np.ndarray
    wfg: np.ndarray
    b_fg: np.ndarray
    v_fg: np.ndarray
    w_res: np.ndarray
    b_res: np.ndarray
    w_p1: np.ndarray
    b_p1: np.ndarray
    w_p2: np.ndarray
    b_p2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    dilations: np.ndarray
    ring: np.ndarray
    ring_off: np.ndarray
    pos: np.ndarray
    scratch: tuple

    @property
    def ring_capacities(self) -> list:
        return [(self.config.filter_width - 1) * d for d in self.config.dilations]

    def run(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0], dtype=self.dtype)
        _wavenet_stream_kernel(
            x,
            cond,
            out,
            self.w_in,
            self.b_in,
            self.wfg,
            self.b_fg,
            self.v_fg,
            self.w_res,
            self.b_res,
            self.w_p1,
            self.b_p1,
            self.w_p2,
            self.b_p2,
            self.w_out,
            self.b_out,
            self.dilations,
            self.ring,
            self.ring_off,
            self.pos,
            self.config.skip_mode == "sum",
            *self.scratch,
        )
        return out


@dataclass
class MlpStreamState:
    config: MlpConfig
    dtype: object
    w_first: np.ndarray
    b_first: np.ndarray
    v_first: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    v_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    ring: np.ndarray
    pos: np.ndarray
    scratch: tuple

    @property
    def ring_capacities(self) -> list:
        return [self.config.input_size - 1]

    def run(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0], dtype=self.dtype)
        _mlp_stream_kernel(
            x,
            cond,
            out,
            self.w_first,
            self.b_first,
            self.v_first,
            self.w_hidden,
            self.b_hidden,
            self.v_hidden,
            self.w_out,
            self.b_out,
            self.ring,
            self.pos,
            *self.scratch,
        )
        return out


def _pack_wavenet(params: WaveNetParams, config: WaveNetConfig, dtype):
    c, w, cd = config.channels, config.filter_width, config.conditioning_dim
    n_layers = config.num_layers
    wfg = np.zeros((n_layers, 2 * c, w * c), dtype=dtype)
    b_fg = np.zeros((n_layers, 2 * c), dtype=dtype)
    v_fg = np.zeros((n_layers, 2 * c, cd), dtype=dtype)
    w_res = np.zeros((n_layers, c, c), dtype=dtype)
    b_res = np.zeros((n_layers, c), dtype=dtype)
    for k, layer in enumerate(params.layers):
        for t in range(w):
            wfg[k, :c, t * c : (t + 1) * c] = layer.filter.taps[:, :, t]
            wfg[k, c:, t * c : (t + 1) * c] = layer.gate.taps[:, :, t]
        b_fg[k, :c] = layer.filter.bias
        b_fg[k, c:] = layer.gate.bias
        v_fg[k, :c] = layer.cond_filter.taps[:, :, 0]
        v_fg[k, c:] = layer.cond_gate.taps[:, :, 0]
        w_res[k] = layer.residual.taps[:, :, 0]
        b_res[k] = layer.residual.bias
    p, s = config.post_channels, config.skip_channels
    w_p1 = np.zeros((2 * p, s), dtype=dtype)
    w_p1[:p] = params.post_filter.taps[:, :, 0]
    w_p1[p:] = params.post_gate.taps[:, :, 0]
    b_p1 = np.concatenate([params.post_filter.bias, params.post_gate.bias]).astype(dtype)
    return wfg, b_fg, v_fg, w_res, b_res, w_p1, b_p1


def stream_init(params, config, precision: str = "single"):
    """Build a zeroed streaming state: equivalent to infinite leading silence."""
    if precision not in _DTYPES:
        raise ConfigError(f"precision must be 'single' or 'double', got {precision!r}")
    dtype = _DTYPES[precision]
    if isinstance(config, WaveNetConfig):
        if not isinstance(params, WaveNetParams):
            raise ConfigError("config/params mismatch")
        wfg, b_fg, v_fg, w_res, b_res, w_p1, b_p1 = _pack_wavenet(params, config, dtype)
        caps = [(config.filter_width - 1) * d for d in config.dilations]
        ring_off = np.concatenate([[0], np.cumsum(caps)]).astype(np.int64)
        c, p, s = config.channels, config.post_channels, config.skip_channels
        scratch = (
            np.zeros(config.filter_width * c, dtype=dtype),
            np.zeros(2 * c, dtype=dtype),
            np.zeros(c, dtype=dtype),
            np.zeros(s, dtype=dtype),
            np.zeros(p, dtype=dtype),
            np.zeros(p, dtype=dtype),
            np.zeros(c, dtype=dtype),
            np.zeros(c, dtype=dtype),
        )
        return WaveNetStreamState(
            config=config,
            dtype=dtype,
            w_in=params.input_proj.taps[:, 0, 0].astype(dtype),
            b_in=params.input_proj.bias.astype(dtype),
            wfg=wfg,
            b_fg=b_fg,
            v_fg=v_fg,
            w_res=w_res,
            b_res=b_res,
            w_p1=w_p1,
            b_p1=b_p1,
            w_p2=params.post_mix.taps[:, :, 0].astype(dtype),
            b_p2=params.post_mix.bias.astype(dtype),
            w_out=params.output.taps[0, :, 0].astype(dtype),
            b_out=params.output.bias.astype(dtype),
            dilations=np.asarray(config.dilations, dtype=np.int64),
            ring=np.zeros((int(sum(caps)), c), dtype=dtype),
            ring_off=ring_off,
            pos=np.zeros(config.num_layers, dtype=np.int64),
            scratch=scratch,
        )
    if isinstance(config, MlpConfig):
        if not isinstance(params, MlpParams):
            raise ConfigError("config/params mismatch")
        units, cd = config.hidden_units, config.conditioning_dim
        n_hidden = config.hidden_layers - 1
        w_hidden = np.zeros((max(n_hidden, 1), units, units), dtype=dtype)
        b_hidden = np.zeros((max(n_hidden, 1), units), dtype=dtype)
        v_hidden = np.zeros((max(n_hidden, 1), units, cd), dtype=dtype)
        for j, layer in enumerate(params.layers[1:]):
            w_hidden[j] = layer.weights
            b_hidden[j] = layer.bias
            v_hidden[j] = layer.cond
        if n_hidden == 0:
            w_hidden = w_hidden[:0]
            b_hidden = b_hidden[:0]
            v_hidden = v_hidden[:0]
        return MlpStreamState(
            config=config,
            dtype=dtype,
            w_first=params.layers[0].weights.astype(dtype),
            b_first=params.layers[0].bias.astype(dtype),
            v_first=params.layers[0].cond.astype(dtype),
            w_hidden=w_hidden,
            b_hidden=b_hidden,
            v_hidden=v_hidden,
            w_out=params.output_weights[0].astype(dtype),
            b_out=params.output_bias.astype(dtype),
            ring=np.zeros(config.input_size - 1, dtype=dtype),
            pos=np.zeros(1, dtype=np.int64),
            scratch=(
                np.zeros(config.input_size, dtype=dtype),
                np.zeros(units, dtype=dtype),
                np.zeros(units, dtype=dtype),
            ),
        )
    raise ConfigError(f"unknown config type {type(config).__name__}")


def _cond_block(state, control, length):
    cd = state.config.conditioning_dim
    cond = np.asarray(control, dtype=state.dtype)
    if cond.ndim == 0:
        return np.full((cd, length), float(cond), dtype=state.dtype)
    if cond.ndim == 1 and cond.shape[0] == cd:
        return np.repeat(cond[:, None], length, axis=1).astype(state.dtype)
    if cond.ndim == 2 and cond.shape == (cd, length):
        return cond.astype(state.dtype)
    raise ShapeError(f"conditioning shape {cond.shape} does not fit ({cd}, {length})")


def stream_step(state, x_n: float, c_n) -> float:
    """Advance the stream by one sample; returns the model output.

    Matches what the batch forward pass would produce at this position
    given the whole history fed so far.
    """
    if not math.isfinite(x_n):
        raise NumericsError(f"non-finite input sample {x_n}")
    x = np.array([x_n], dtype=state.dtype)
    cond = _cond_block(state, c_n, 1)
    return float(state.run(x, cond)[0])


def stream_process_block(state, block: AudioBuffer, control) -> AudioBuffer:
    """Process a block through the same per-sample kernel as stream_step."""
    samples = block.samples if isinstance(block, AudioBuffer) else np.asarray(block)
    rate = block.sample_rate_hz if isinstance(block, AudioBuffer) else 44100
    if samples.size == 0:
        return AudioBuffer(np.zeros(0), rate)
    if not np.all(np.isfinite(samples)):
        raise NumericsError("non-finite input samples")
    x = samples.astype(state.dtype)
    cond = _cond_block(state, control, x.shape[0])
    return AudioBuffer(state.run(x, cond).astype(np.float64), rate)


# ---------------------------------------------------------------------------
# Real-time benchmark

@dataclass
class BenchReport:
    model: str
    mode: str
    audio_s: float
    wall_s: float
    rt_factor: float
    cpu_description: str

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "mode": self.mode,
            "audio_s": self.audio_s,
            "wall_s": self.wall_s,
            "rt_factor": self.rt_factor,
            "cpu_description": self.cpu_description,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def benchmark(
    params,
    config,
    mode: str = "batch",
    duration_s: float = 30.0,
    sample_rate_hz: int | None = None,
    model_name: str = "model",
    runs: int = 5,
    seed: int = 0,
) -> BenchReport:
    """Median wall time of `runs` timed passes (after one warm-up) over
    synthesized noise; reports seconds of audio per second of compute.
    Inference runs in single precision, as a deployment would."""
    if duration_s < 10.0:
        raise DomainError(f"benchmark needs >= 10 s of audio, got {duration_s}")
    if mode not in ("batch", "streaming"):
        raise DomainError(f"mode must be batch or streaming, got {mode!r}")
    if runs < 1:
        raise DomainError("need at least one timed run")
    fs = sample_rate_hz or config.sample_rate_hz
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-0.5, 0.5, int(round(duration_s * fs)))
    control = 0.7

    def one_pass():
        if mode == "batch":
            if isinstance(config, WaveNetConfig):
                wavenet_process_signal(params, config, noise, control, dtype=np.float32)
            else:
                mlp_forward_signal(params, config, noise, control, dtype=np.float32)
        else:
            state = stream_init(params, config, "single")
            stream_process_block(state, AudioBuffer(noise, fs), control)

    one_pass()  # warm-up (JIT compile, cache heat)
    times = []
    for _ in range(runs):
        started = time.perf_counter()
        one_pass()
        times.append(time.perf_counter() - started)
    wall = float(np.median(times))
    return BenchReport(
        model=model_name,
        mode=mode,
        audio_s=duration_s,
        wall_s=wall,
        rt_factor=duration_s / wall,
        cpu_description=platform.processor() or platform.machine(),
    )
