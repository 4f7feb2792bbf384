"""Conditioned feedforward WaveNet and MLP baseline.

The WaveNet is a stack of dilated causal convolution layers with gated
activations, residual 1x1 connections, and control conditioning injected
into every convolutional layer through 1x1 kernels. The per-layer gated
outputs feed a fully connected post-processing head (gated 1x1 layer,
tanh 1x1 layer, linear 1x1 output). The MLP baseline slides a window of
input samples and applies tanh layers with the same additive conditioning.

Parameter serialization order is normative and shared by the flat vector
used for optimization and the model file blob:
input_proj taps+bias; per layer: filter taps+bias, gate taps+bias,
cond_filter taps, cond_gate taps, residual taps+bias; then post filter
taps+bias, post gate taps+bias, post mix taps+bias, output taps+bias.
MLP: per hidden layer W, bias, V; then output weights, output bias.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, IoError, ModelFileError, ShapeError
from .nncore import (
    ConvKernel,
    causal_conv_forward,
    conv_backward_cm,
    conv_forward_cm,
    gated_activation_backward,
    gated_activation_forward,
    init_kernel,
    sigmoid,
)

MODEL_MAGIC = b"VAMF"
MODEL_VERSION = 1
CONTROL_RANGE = (0.0, 1.0)

DEFAULT_DILATIONS = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512)


@dataclass(frozen=True)
class WaveNetConfig:
    num_layers: int = 10
    channels: int = 16
    filter_width: int = 3
    dilations: tuple = DEFAULT_DILATIONS
    postproc_channels: int | None = None
    conditioning_dim: int = 1
    skip_mode: str = "concat"  # "concat" or "sum" of per-layer gated outputs
    sample_rate_hz: int = 44100

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.num_layers < 1 or self.channels < 1 or self.filter_width < 1:
            raise ConfigError("num_layers, channels, filter_width must be >= 1")
        if len(self.dilations) != self.num_layers:
            raise ConfigError(
                f"{len(self.dilations)} dilations for {self.num_layers} layers"
            )
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be >= 1")
        if self.postproc_channels is not None and self.postproc_channels < 1:
            raise ConfigError("postproc_channels must be >= 1")
        if self.conditioning_dim < 1:
            raise ConfigError("conditioning_dim must be >= 1")
        if self.skip_mode not in ("concat", "sum"):
            raise ConfigError(f"unknown skip_mode {self.skip_mode!r}")
        if self.sample_rate_hz < 1:
            raise ConfigError("sample_rate_hz must be positive")

    @property
    def post_channels(self) -> int:
        return self.channels if self.postproc_channels is None else self.postproc_channels

    @property
    def skip_channels(self) -> int:
        return self.num_layers * self.channels if self.skip_mode == "concat" else self.channels

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "channels": self.channels,
            "filter_width": self.filter_width,
            "dilations": list(self.dilations),
            "postproc_channels": self.postproc_channels,
            "conditioning_dim": self.conditioning_dim,
            "skip_mode": self.skip_mode,
            "sample_rate_hz": self.sample_rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WaveNetConfig":
        return cls(**{k: (tuple(v) if k == "dilations" else v) for k, v in d.items()})


def wavenet1_config(**overrides) -> WaveNetConfig:
    """Small preset: 2 channels, ~500 parameters."""
    return WaveNetConfig(channels=2, **overrides)


def wavenet2_config(**overrides) -> WaveNetConfig:
    """Large preset: 16 channels, ~24k parameters."""
    return WaveNetConfig(channels=16, **overrides)


def receptive_field(config: WaveNetConfig) -> int:
    """Number of past samples that can influence the current output."""
    return (config.filter_width - 1) * sum(config.dilations)


@dataclass
class WaveNetLayerParams:
    filter: ConvKernel
    gate: ConvKernel
    cond_filter: ConvKernel
    cond_gate: ConvKernel
    residual: ConvKernel


@dataclass
class WaveNetParams:
    input_proj: ConvKernel
    layers: list
    post_filter: ConvKernel
    post_gate: ConvKernel
    post_mix: ConvKernel
    output: ConvKernel

    def param_arrays(self):
        """All trainable arrays in the normative serialization order."""
        yield self.input_proj.taps
        yield self.input_proj.bias
        for layer in self.layers:
            yield layer.filter.taps
            yield layer.filter.bias
            yield layer.gate.taps
            yield layer.gate.bias
            yield layer.cond_filter.taps
            yield layer.cond_gate.taps
            yield layer.residual.taps
            yield layer.residual.bias
        yield self.post_filter.taps
        yield self.post_filter.bias
        yield self.post_gate.taps
        yield self.post_gate.bias
        yield self.post_mix.taps
        yield self.post_mix.bias
        yield self.output.taps
        yield self.output.bias


@dataclass(frozen=True)
class MlpConfig:
    input_size: int = 2047  # default WaveNet receptive field + current sample
    hidden_layers: int = 8
    hidden_units: int = 16
    conditioning_dim: int = 1
    sample_rate_hz: int = 44100

    def __post_init__(self):
        if min(self.input_size, self.hidden_layers, self.hidden_units, self.conditioning_dim) < 1:
            raise ConfigError("all MLP dimensions must be >= 1")
        if self.sample_rate_hz < 1:
            raise ConfigError("sample_rate_hz must be positive")

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "hidden_layers": self.hidden_layers,
            "hidden_units": self.hidden_units,
            "conditioning_dim": self.conditioning_dim,
            "sample_rate_hz": self.sample_rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(**d)


def mlp_config(**overrides) -> MlpConfig:
    """Baseline preset: 8 hidden layers of 16 units, ~35k parameters."""
    return MlpConfig(**overrides)


@dataclass
class MlpLayerParams:
    weights: np.ndarray  # (units, fan_in)
    bias: np.ndarray  # (units,)
    cond: np.ndarray  # (units, conditioning_dim)


@dataclass
class MlpParams:
    layers: list
    output_weights: np.ndarray  # (1, units)
    output_bias: np.ndarray  # (1,)

    def param_arrays(self):
        for layer in self.layers:
            yield layer.weights
            yield layer.bias
            yield layer.cond
        yield self.output_weights
        yield self.output_bias


def count_parameters(params) -> int:
    """Total scalar count over all kernels and biases."""
    return sum(a.size for a in params.param_arrays())


def flatten_params(params) -> np.ndarray:
    """Concatenate all parameter arrays (normative order) into one vector."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in params.param_arrays()])


# ---------------------------------------------------------------------------
# Construction

def init_wavenet_params(config: WaveNetConfig, seed: int) -> WaveNetParams:
    """Deterministic random initialization (uniform taps, zero biases)."""
    rng = np.random.default_rng(seed)
    c, w, cd = config.channels, config.filter_width, config.conditioning_dim
    layers = []
    input_proj = init_kernel(rng, c, 1)
    for d in config.dilations:
        layers.append(
            WaveNetLayerParams(
                filter=init_kernel(rng, c, c, w, d),
                gate=init_kernel(rng, c, c, w, d),
                cond_filter=init_kernel(rng, c, cd, bias=False),
                cond_gate=init_kernel(rng, c, cd, bias=False),
                residual=init_kernel(rng, c, c),
            )
        )
    s, p = config.skip_channels, config.post_channels
    return WaveNetParams(
        input_proj=input_proj,
        layers=layers,
        post_filter=init_kernel(rng, p, s),
        post_gate=init_kernel(rng, p, s),
        post_mix=init_kernel(rng, p, p),
        output=init_kernel(rng, 1, p),
    )


def wavenet_params_from_flat(config: WaveNetConfig, flat: np.ndarray) -> WaveNetParams:
    """Rebuild structured parameters from a flat vector (normative order)."""
    flat = np.asarray(flat, dtype=np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > flat.size:
            raise ModelFileError("parameter blob shorter than the config implies")
        out = flat[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    c, w, cd = config.channels, config.filter_width, config.conditioning_dim
    input_proj = ConvKernel(take((c, 1, 1)), take((c,)), 1)
    layers = []
    for d in config.dilations:
        layers.append(
            WaveNetLayerParams(
                filter=ConvKernel(take((c, c, w)), take((c,)), d),
                gate=ConvKernel(take((c, c, w)), take((c,)), d),
                cond_filter=ConvKernel(take((c, cd, 1)), None, 1),
                cond_gate=ConvKernel(take((c, cd, 1)), None, 1),
                residual=ConvKernel(take((c, c, 1)), take((c,)), 1),
            )
        )
    s, p = config.skip_channels, config.post_channels
    params = WaveNetParams(
        input_proj=input_proj,
        layers=layers,
        post_filter=ConvKernel(take((p, s, 1)), take((p,)), 1),
        post_gate=ConvKernel(take((p, s, 1)), take((p,)), 1),
        post_mix=ConvKernel(take((p, p, 1)), take((p,)), 1),
        output=ConvKernel(take((1, p, 1)), take((1,)), 1),
    )
    if pos != flat.size:
        raise ModelFileError(
            f"parameter blob has {flat.size} values, config implies {pos}"
        )
    return params


def init_mlp_params(config: MlpConfig, seed: int) -> MlpParams:
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = config.input_size
    for _ in range(config.hidden_layers):
        w = rng.uniform(-1, 1, (config.hidden_units, fan_in)) * np.sqrt(1.0 / fan_in)
        v = rng.uniform(-1, 1, (config.hidden_units, config.conditioning_dim)) * np.sqrt(
            1.0 / config.conditioning_dim
        )
        layers.append(
            MlpLayerParams(
                weights=w.astype(np.float32).astype(np.float64),
                bias=np.zeros(config.hidden_units),
                cond=v.astype(np.float32).astype(np.float64),
            )
        )
        fan_in = config.hidden_units
    w_out = rng.uniform(-1, 1, (1, fan_in)) * np.sqrt(1.0 / fan_in)
    return MlpParams(
        layers=layers,
        output_weights=w_out.astype(np.float32).astype(np.float64),
        output_bias=np.zeros(1),
    )


def mlp_params_from_flat(config: MlpConfig, flat: np.ndarray) -> MlpParams:
    flat = np.asarray(flat, dtype=np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > flat.size:
            raise ModelFileError("parameter blob shorter than the config implies")
        out = flat[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    layers = []
    fan_in = config.input_size
    for _ in range(config.hidden_layers):
        layers.append(
            MlpLayerParams(
                weights=take((config.hidden_units, fan_in)),
                bias=take((config.hidden_units,)),
                cond=take((config.hidden_units, config.conditioning_dim)),
            )
        )
        fan_in = config.hidden_units
    params = MlpParams(layers=layers, output_weights=take((1, fan_in)), output_bias=take((1,)))
    if pos != flat.size:
        raise ModelFileError(f"parameter blob has {flat.size} values, config implies {pos}")
    return params


# ---------------------------------------------------------------------------
# WaveNet forward / backward

def _check_xc(x, c, config):
    x = np.asarray(x)
    c = np.asarray(c)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if c.ndim == 2:
        c = np.broadcast_to(c[None], (x.shape[0],) + c.shape)
    if x.ndim != 3 or c.ndim != 3:
        raise ShapeError(f"bad input ranks: x {x.shape}, c {c.shape}")
    if x.shape[1] != 1:
        raise ShapeError(f"x must have one channel, got {x.shape[1]}")
    if c.shape[1] != config.conditioning_dim:
        raise ShapeError(
            f"c has {c.shape[1]} channels, config expects {config.conditioning_dim}"
        )
    if x.shape[2] != c.shape[2] or x.shape[0] != c.shape[0]:
        raise ShapeError(f"x {x.shape} and c {c.shape} do not align")
    return x, c, batched


def _wavenet_cache(params: WaveNetParams, config: WaveNetConfig, x3, c3):
    """Forward pass keeping every intermediate needed by the adjoint.

    Activations live in channel-major (C, B, T) layout so each convolution
    is one large GEMM; cache["y_bt"] is the prediction as (B, T).
    """
    x_cm = np.ascontiguousarray(x3.transpose(1, 0, 2))
    c_cm = np.ascontiguousarray(c3.transpose(1, 0, 2))
    cache = {"x": x_cm, "c": c_cm, "xs": [], "f": [], "g": [], "z": []}
    xk = conv_forward_cm(params.input_proj, x_cm)
    for layer in params.layers:
        cache["xs"].append(xk)
        f = conv_forward_cm(layer.filter, xk) + conv_forward_cm(layer.cond_filter, c_cm)
        g = conv_forward_cm(layer.gate, xk) + conv_forward_cm(layer.cond_gate, c_cm)
        z = gated_activation_forward(f, g)
        cache["f"].append(f)
        cache["g"].append(g)
        cache["z"].append(z)
        xk = xk + conv_forward_cm(layer.residual, z)
    if config.skip_mode == "concat":
        skip = np.concatenate(cache["z"], axis=0)
    else:
        skip = cache["z"][0].copy()
        for z in cache["z"][1:]:
            skip += z
    cache["skip"] = skip
    cache["pf"] = conv_forward_cm(params.post_filter, skip)
    cache["pg"] = conv_forward_cm(params.post_gate, skip)
    cache["p1"] = gated_activation_forward(cache["pf"], cache["pg"])
    cache["q"] = conv_forward_cm(params.post_mix, cache["p1"])
    cache["p2"] = np.tanh(cache["q"])
    cache["y_bt"] = conv_forward_cm(params.output, cache["p2"])[0]
    return cache


def wavenet_forward(params: WaveNetParams, config: WaveNetConfig, x, c):
    """Predict a signal from input x (1 x T) and conditioning c (cond_dim x T).

    Returns (prediction, per-layer gated outputs). A leading batch axis on
    x and c is accepted and carried through.
    """
    x3, c3, batched = _check_xc(x, c, config)
    cache = _wavenet_cache(params, config, x3, c3)
    y = cache["y_bt"][:, None, :]  # (B, 1, T)
    zs = [np.ascontiguousarray(z.transpose(1, 0, 2)) for z in cache["z"]]
    if not batched:
        return y[0], [z[0] for z in zs]
    return y, zs


def _zeros_like_params(params: WaveNetParams) -> WaveNetParams:
    def zk(k: ConvKernel) -> ConvKernel:
        return ConvKernel(
            np.zeros_like(k.taps),
            None if k.bias is None else np.zeros_like(k.bias),
            k.dilation,
        )

    return WaveNetParams(
        input_proj=zk(params.input_proj),
        layers=[
            WaveNetLayerParams(
                zk(l.filter), zk(l.gate), zk(l.cond_filter), zk(l.cond_gate), zk(l.residual)
            )
            for l in params.layers
        ],
        post_filter=zk(params.post_filter),
        post_gate=zk(params.post_gate),
        post_mix=zk(params.post_mix),
        output=zk(params.output),
    )


def _wavenet_backward_cache(params, config, cache, upstream_cm):
    """Adjoint through the cached forward pass (channel-major upstream of
    shape (1, B, T)). Returns a WaveNetParams holding gradients."""
    grads = _zeros_like_params(params)

    dp2, g_out_taps, g_out_bias = conv_backward_cm(params.output, cache["p2"], upstream_cm)
    grads.output.taps[:] = g_out_taps
    grads.output.bias[:] = g_out_bias

    dq = dp2 * (1.0 - cache["p2"] ** 2)
    dp1, g_mix_taps, g_mix_bias = conv_backward_cm(params.post_mix, cache["p1"], dq)
    grads.post_mix.taps[:] = g_mix_taps
    grads.post_mix.bias[:] = g_mix_bias

    dpf, dpg = gated_activation_backward(cache["pf"], cache["pg"], dp1)
    ds_f, g_pf_taps, g_pf_bias = conv_backward_cm(params.post_filter, cache["skip"], dpf)
    ds_g, g_pg_taps, g_pg_bias = conv_backward_cm(params.post_gate, cache["skip"], dpg)
    grads.post_filter.taps[:] = g_pf_taps
    grads.post_filter.bias[:] = g_pf_bias
    grads.post_gate.taps[:] = g_pg_taps
    grads.post_gate.bias[:] = g_pg_bias
    dskip = ds_f + ds_g

    c_cm = cache["c"]
    n_layers = len(params.layers)
    channels = config.channels
    dx_next = None  # gradient on x_{k+1}; the final x_L is unused downstream
    for k in range(n_layers - 1, -1, -1):
        layer = params.layers[k]
        glayer = grads.layers[k]
        if config.skip_mode == "concat":
            dz = dskip[k * channels : (k + 1) * channels].copy()
        else:
            dz = dskip.copy()
        if dx_next is not None:
            dz_res, g_res_taps, g_res_bias = conv_backward_cm(
                layer.residual, cache["z"][k], dx_next
            )
            dz += dz_res
            glayer.residual.taps[:] = g_res_taps
            glayer.residual.bias[:] = g_res_bias
        df, dg = gated_activation_backward(cache["f"][k], cache["g"][k], dz)
        dx_f, g_f_taps, g_f_bias = conv_backward_cm(layer.filter, cache["xs"][k], df)
        dx_g, g_g_taps, g_g_bias = conv_backward_cm(layer.gate, cache["xs"][k], dg)
        glayer.filter.taps[:] = g_f_taps
        glayer.filter.bias[:] = g_f_bias
        glayer.gate.taps[:] = g_g_taps
        glayer.gate.bias[:] = g_g_bias
        _, g_cf_taps, _ = conv_backward_cm(layer.cond_filter, c_cm, df)
        _, g_cg_taps, _ = conv_backward_cm(layer.cond_gate, c_cm, dg)
        glayer.cond_filter.taps[:] = g_cf_taps
        glayer.cond_gate.taps[:] = g_cg_taps
        dx = dx_f + dx_g
        if dx_next is not None:
            dx += dx_next  # residual shortcut
        dx_next = dx

    _, g_in_taps, g_in_bias = conv_backward_cm(params.input_proj, cache["x"], dx_next)
    grads.input_proj.taps[:] = g_in_taps
    grads.input_proj.bias[:] = g_in_bias
    return grads


def wavenet_backward(params: WaveNetParams, config: WaveNetConfig, x, c, upstream):
    """Gradient of sum(upstream * prediction) with respect to every parameter."""
    x3, c3, _ = _check_xc(x, c, config)
    up = np.asarray(upstream)
    if up.ndim == 2:
        up = up[None]
    if up.shape != (x3.shape[0], 1, x3.shape[2]):
        raise ShapeError(f"upstream shape {up.shape} does not match output {(x3.shape[0], 1, x3.shape[2])}")
    cache = _wavenet_cache(params, config, x3, c3)
    return _wavenet_backward_cache(params, config, cache, up.transpose(1, 0, 2))


# ---------------------------------------------------------------------------
# Packed training path.
#
# A batch of equal-length segments is laid out along one time axis with a
# zero gap of one receptive field before each segment, then masked back to
# zero at every layer input. In-segment positions can only reach their own
# gap (all zeros), so values match the per-segment zero-padding convention
# exactly, while every convolution becomes a single 2-D GEMM.

@njit(cache=True)
def _fused_gate_backward(dz, ts, dfg):
    """dfg[:C] = dz*(1-t^2)*s and dfg[C:] = dz*t*s*(1-s) in one pass."""
    c = dz.shape[0]
    n = dz.shape[1]
    for i in range(c):
        for j in range(n):
            t = ts[i, j]
            s = ts[c + i, j]
            u = dz[i, j]
            dfg[i, j] = u * (1.0 - t * t) * s
            dfg[c + i, j] = u * t * s * (1.0 - s)


class TrainWorkspace:
    """Reusable buffer pool for the packed training path.

    Per-batch arrays at training scale are tens of MB; reallocating them
    every step costs more in page faults than the math. One workspace per
    training run, never shared across threads.
    """

    def __init__(self):
        self._bufs = {}

    def get(self, key, shape):
        buf = self._bufs.get(key)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self._bufs[key] = buf
        return buf


def _flat_fg(layer: WaveNetLayerParams) -> np.ndarray:
    """Stack filter+gate taps and conditioning into one (2C, w*C + cd) GEMM
    operand: column t*C+i reads input channel i delayed by (w-1-t)*d, the
    trailing cd columns read the conditioning rows appended to the im2col."""
    o, i, w = layer.filter.taps.shape
    cd = layer.cond_filter.taps.shape[1]
    out = np.empty((2 * o, w * i + cd))
    out[:o, : w * i] = layer.filter.taps.transpose(0, 2, 1).reshape(o, w * i)
    out[o:, : w * i] = layer.gate.taps.transpose(0, 2, 1).reshape(o, w * i)
    out[:o, w * i :] = layer.cond_filter.taps[:, :, 0]
    out[o:, w * i :] = layer.cond_gate.taps[:, :, 0]
    return out


def _sigmoid_inplace(pre: np.ndarray, out: np.ndarray) -> None:
    """out = logistic(pre) via 0.5*(1+tanh(pre/2)), no temporaries."""
    np.multiply(pre, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5


def _packed_cache(
    params: WaveNetParams,
    config: WaveNetConfig,
    segments,
    controls,
    keep: bool = True,
    ws: TrainWorkspace | None = None,
):
    """Forward over gap-packed segments. segments (B, T), controls (B,).

    Returns (predictions (B, T), cache or None). The cache holds the
    augmented im2col matrices and gated activations the adjoint needs.
    """
    ws = ws or TrainWorkspace()
    segments = np.asarray(segments, dtype=np.float64)
    batch, length = segments.shape
    gap = receptive_field(config)
    block = gap + length
    n = batch * block
    c_ch, w, cd = config.channels, config.filter_width, config.conditioning_dim

    x = ws.get("x", (1, n))
    x3 = x.reshape(1, batch, block)
    x3[:, :, :gap] = 0.0
    x3[:, :, gap:] = segments
    cond = ws.get("cond", (cd, n))
    cond.reshape(cd, batch, block)[:] = np.asarray(controls)[None, :, None]

    cache = {
        "x": x, "c": cond, "gap": gap, "block": block, "batch": batch,
        "ws": ws, "col": [], "ts": [], "z": [],
    }
    xk = ws.get("x0", (c_ch, n))
    np.multiply(params.input_proj.taps[:, 0, 0][:, None], x, out=xk)
    xk += params.input_proj.bias[:, None]
    xk.reshape(c_ch, batch, block)[:, :, :gap] = 0.0

    n_cols = w * c_ch + cd
    for k, layer in enumerate(params.layers):
        d = layer.filter.dilation
        col = ws.get(("col", k), (n_cols, n))
        for t in range(w):
            shift = (w - 1 - t) * d
            dst = col[t * c_ch : (t + 1) * c_ch]
            if shift == 0:
                dst[:] = xk
            elif shift < n:
                dst[:, :shift] = 0.0
                dst[:, shift:] = xk[:, : n - shift]
            else:
                dst[:] = 0.0
        col[w * c_ch :] = cond
        pre = ws.get(("pre", k), (2 * c_ch, n))
        np.matmul(_flat_fg(layer), col, out=pre)
        pre[:c_ch] += layer.filter.bias[:, None]
        pre[c_ch:] += layer.gate.bias[:, None]
        ts = ws.get(("ts", k), (2 * c_ch, n))
        np.tanh(pre[:c_ch], out=ts[:c_ch])
        _sigmoid_inplace(pre[c_ch:], ts[c_ch:])
        z = ws.get(("z", k), (c_ch, n))
        np.multiply(ts[:c_ch], ts[c_ch:], out=z)
        x_next = ws.get(("xk", k + 1), (c_ch, n))
        np.matmul(layer.residual.taps[:, :, 0], z, out=x_next)
        x_next += layer.residual.bias[:, None]
        x_next += xk
        x_next.reshape(c_ch, batch, block)[:, :, :gap] = 0.0
        cache["col"].append(col)
        cache["ts"].append(ts)
        cache["z"].append(z)
        xk = x_next

    # Post-processing head; the skip GEMM is accumulated layer by layer so
    # the concatenated skip matrix never materializes.
    p_ch = config.post_channels
    pre_p1 = ws.get("pre_p1", (2 * p_ch, n))
    pre_p1[:p_ch] = params.post_filter.bias[:, None]
    pre_p1[p_ch:] = params.post_gate.bias[:, None]
    scratch_p = ws.get("scratch_p", (p_ch, n))
    for k in range(config.num_layers):
        wf, wg = _post_slices(params, config, k)
        np.matmul(wf, cache["z"][k], out=scratch_p)
        pre_p1[:p_ch] += scratch_p
        np.matmul(wg, cache["z"][k], out=scratch_p)
        pre_p1[p_ch:] += scratch_p
    ts_p1 = ws.get("ts_p1", (2 * p_ch, n))
    np.tanh(pre_p1[:p_ch], out=ts_p1[:p_ch])
    _sigmoid_inplace(pre_p1[p_ch:], ts_p1[p_ch:])
    p1 = ws.get("p1", (p_ch, n))
    np.multiply(ts_p1[:p_ch], ts_p1[p_ch:], out=p1)
    p2 = ws.get("p2", (p_ch, n))
    np.matmul(params.post_mix.taps[:, :, 0], p1, out=p2)
    p2 += params.post_mix.bias[:, None]
    np.tanh(p2, out=p2)
    y = ws.get("y", (1, n))
    np.matmul(params.output.taps[:, :, 0], p2, out=y)
    y += params.output.bias[:, None]
    y_bt = np.ascontiguousarray(y.reshape(1, batch, block)[0, :, gap:])
    if not keep:
        return y_bt, None
    cache.update(ts_p1=ts_p1, p1=p1, p2=p2)
    return y_bt, cache


def _post_slices(params: WaveNetParams, config: WaveNetConfig, k: int):
    """Post filter/gate weight views feeding from layer k's gated output."""
    if config.skip_mode == "concat":
        c_ch = config.channels
        return (
            params.post_filter.taps[:, k * c_ch : (k + 1) * c_ch, 0],
            params.post_gate.taps[:, k * c_ch : (k + 1) * c_ch, 0],
        )
    return params.post_filter.taps[:, :, 0], params.post_gate.taps[:, :, 0]


def _packed_backward(params: WaveNetParams, config: WaveNetConfig, cache, d_pred):
    """Adjoint of _packed_cache for upstream d_pred (B, T) on the output."""
    grads = _zeros_like_params(params)
    ws = cache["ws"]
    gap, block, batch = cache["gap"], cache["block"], cache["batch"]
    c_ch, w, cd = config.channels, config.filter_width, config.conditioning_dim
    p_ch = config.post_channels
    n = batch * block

    dy = ws.get("dy", (1, n))
    dy3 = dy.reshape(1, batch, block)
    dy3[:, :, :gap] = 0.0
    dy3[:, :, gap:] = d_pred

    p2, p1, ts_p1 = cache["p2"], cache["p1"], cache["ts_p1"]
    grads.output.taps[:] = (dy @ p2.T)[:, :, None]
    grads.output.bias[:] = dy.sum(axis=1)
    dq = ws.get("dq", (p_ch, n))
    np.multiply(params.output.taps[:, :, 0].T, dy, out=dq)  # (P,1)*(1,N)
    dq *= 1.0 - p2 * p2
    grads.post_mix.taps[:] = (dq @ p1.T)[:, :, None]
    grads.post_mix.bias[:] = dq.sum(axis=1)
    dp1 = ws.get("dp1", (p_ch, n))
    np.matmul(params.post_mix.taps[:, :, 0].T, dq, out=dp1)
    dpfg = ws.get("dpfg", (2 * p_ch, n))
    _fused_gate_backward(dp1, ts_p1, dpfg)
    dpf, dpg = dpfg[:p_ch], dpfg[p_ch:]
    grads.post_filter.bias[:] = dpf.sum(axis=1)
    grads.post_gate.bias[:] = dpg.sum(axis=1)

    dx_next = None
    for k in range(config.num_layers - 1, -1, -1):
        layer = params.layers[k]
        glayer = grads.layers[k]
        ts, z, col = cache["ts"][k], cache["z"][k], cache["col"][k]
        t_, s_ = ts[:c_ch], ts[c_ch:]
        wf, wg = _post_slices(params, config, k)
        gwf, gwg = _post_slices(grads, config, k)
        gwf[:, :] = (dpf @ z.T)[:, :]
        gwg[:, :] = (dpg @ z.T)[:, :]
        dz = ws.get(("dz", k), (c_ch, n))
        scratch_c = ws.get("scratch_c", (c_ch, n))
        np.matmul(np.ascontiguousarray(wf.T), dpf, out=dz)
        np.matmul(np.ascontiguousarray(wg.T), dpg, out=scratch_c)
        dz += scratch_c
        if dx_next is not None:
            glayer.residual.taps[:] = (dx_next @ z.T)[:, :, None]
            glayer.residual.bias[:] = dx_next.sum(axis=1)
            np.matmul(layer.residual.taps[:, :, 0].T, dx_next, out=scratch_c)
            dz += scratch_c
        dfg = ws.get(("dfg", k), (2 * c_ch, n))
        _fused_gate_backward(dz, ts, dfg)
        g_aug = dfg @ col.T  # (2C, w*C+cd): taps and conditioning grads at once
        glayer.filter.taps[:] = g_aug[:c_ch, : w * c_ch].reshape(c_ch, w, c_ch).transpose(0, 2, 1)
        glayer.gate.taps[:] = g_aug[c_ch:, : w * c_ch].reshape(c_ch, w, c_ch).transpose(0, 2, 1)
        glayer.cond_filter.taps[:] = g_aug[:c_ch, w * c_ch :][:, :, None]
        glayer.cond_gate.taps[:] = g_aug[c_ch:, w * c_ch :][:, :, None]
        glayer.filter.bias[:] = dfg[:c_ch].sum(axis=1)
        glayer.gate.bias[:] = dfg[c_ch:].sum(axis=1)
        dcol = ws.get(("dcol", k), (w * c_ch, n))
        np.matmul(_flat_fg(layer)[:, : w * c_ch].T.copy(), dfg, out=dcol)
        dx = ws.get(("dx", k), (c_ch, n))
        d = layer.filter.dilation
        dx[:] = dcol[(w - 1) * c_ch :]  # the shift-0 tap
        for t in range(w - 1):
            shift = (w - 1 - t) * d
            if shift < n:
                dx[:, : n - shift] += dcol[t * c_ch : (t + 1) * c_ch, shift:]
        if dx_next is not None:
            dx += dx_next  # residual shortcut
        dx.reshape(c_ch, batch, block)[:, :, :gap] = 0.0
        dx_next = dx

    grads.input_proj.taps[:] = (dx_next @ cache["x"].T)[:, :, None]
    grads.input_proj.bias[:] = dx_next.sum(axis=1)
    return grads


def wavenet_process_signal(params, config, samples: np.ndarray, control: float, dtype=np.float64) -> np.ndarray:
    """Run the net over a whole mono signal at a fixed control setting.

    Skips the layer-output bookkeeping so long signals stay cheap.
    """
    x = np.asarray(samples, dtype=dtype)[None, None, :]
    c = np.full((1, config.conditioning_dim, x.shape[2]), control, dtype=dtype)
    use_params = params if dtype == np.float64 else cast_params(params, dtype)
    length = x.shape[2]
    p = config.post_channels
    acc_f = np.zeros((1, p, length), dtype=dtype)
    acc_g = np.zeros((1, p, length), dtype=dtype)
    xk = causal_conv_forward(use_params.input_proj, x)
    channels = config.channels
    for k, layer in enumerate(use_params.layers):
        f = causal_conv_forward(layer.filter, xk) + causal_conv_forward(layer.cond_filter, c)
        g = causal_conv_forward(layer.gate, xk) + causal_conv_forward(layer.cond_gate, c)
        z = gated_activation_forward(f, g)
        if config.skip_mode == "concat":
            wf = ConvKernel(use_params.post_filter.taps[:, k * channels : (k + 1) * channels, :], None, 1)
            wg = ConvKernel(use_params.post_gate.taps[:, k * channels : (k + 1) * channels, :], None, 1)
            acc_f += causal_conv_forward(wf, z)
            acc_g += causal_conv_forward(wg, z)
        else:
            acc_f += causal_conv_forward(ConvKernel(use_params.post_filter.taps, None, 1), z)
            acc_g += causal_conv_forward(ConvKernel(use_params.post_gate.taps, None, 1), z)
        xk = xk + causal_conv_forward(layer.residual, z)
    acc_f += use_params.post_filter.bias.astype(dtype)[:, None]
    acc_g += use_params.post_gate.bias.astype(dtype)[:, None]
    p1 = gated_activation_forward(acc_f, acc_g)
    p2 = np.tanh(causal_conv_forward(use_params.post_mix, p1))
    y = causal_conv_forward(use_params.output, p2)
    return y[0, 0]


def cast_params(params: WaveNetParams, dtype) -> WaveNetParams:
    def ck(k: ConvKernel) -> ConvKernel:
        return ConvKernel(
            k.taps.astype(dtype),
            None if k.bias is None else k.bias.astype(dtype),
            k.dilation,
        )

    return WaveNetParams(
        input_proj=ck(params.input_proj),
        layers=[
            WaveNetLayerParams(
                ck(l.filter), ck(l.gate), ck(l.cond_filter), ck(l.cond_gate), ck(l.residual)
            )
            for l in params.layers
        ],
        post_filter=ck(params.post_filter),
        post_gate=ck(params.post_gate),
        post_mix=ck(params.post_mix),
        output=ck(params.output),
    )


# ---------------------------------------------------------------------------
# MLP baseline

def _mlp_window_matrix(samples: np.ndarray, input_size: int) -> np.ndarray:
    """(T, input_size) sliding windows over a zero-left-padded signal."""
    padded = np.concatenate([np.zeros(input_size - 1, dtype=samples.dtype), samples])
    return np.lib.stride_tricks.sliding_window_view(padded, input_size)


def mlp_forward(params: MlpParams, config: MlpConfig, window: np.ndarray, control: float) -> float:
    """One predicted sample from one window of input samples."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (config.input_size,):
        raise ShapeError(f"window shape {window.shape}, expected ({config.input_size},)")
    c = np.full(config.conditioning_dim, control)
    h = window
    for layer in params.layers:
        h = np.tanh(layer.weights @ h + layer.cond @ c + layer.bias)
    return float((params.output_weights @ h + params.output_bias)[0])


def _mlp_hidden_states(params, config, windows, control):
    c = np.full(config.conditioning_dim, control)
    hs = [windows]
    h = windows
    for layer in params.layers:
        h = np.tanh(h @ layer.weights.T + layer.cond @ c + layer.bias)
        hs.append(h)
    return hs


def mlp_forward_signal(
    params: MlpParams,
    config: MlpConfig,
    samples: np.ndarray,
    control: float,
    dtype=np.float64,
    chunk: int = 16384,
) -> np.ndarray:
    """Slide the MLP over a whole signal; one output per time step.

    Windows are materialized chunk by chunk to bound memory.
    """
    samples = np.asarray(samples, dtype=dtype)
    out = np.empty(samples.shape[0], dtype=dtype)
    padded = np.concatenate([np.zeros(config.input_size - 1, dtype=dtype), samples])
    c = np.full(config.conditioning_dim, control, dtype=dtype)
    weights = [
        (l.weights.astype(dtype), l.bias.astype(dtype), l.cond.astype(dtype)) for l in params.layers
    ]
    w_out = params.output_weights.astype(dtype)
    b_out = params.output_bias.astype(dtype)
    for start in range(0, samples.shape[0], chunk):
        stop = min(start + chunk, samples.shape[0])
        view = np.lib.stride_tricks.sliding_window_view(
            padded[start : stop + config.input_size - 1], config.input_size
        )
        h = view
        for w, b, v in weights:
            h = np.tanh(h @ w.T + v @ c + b)
        out[start:stop] = (h @ w_out.T + b_out)[:, 0]
    return out


def mlp_backward_signal(params: MlpParams, config: MlpConfig, samples, control, upstream) -> MlpParams:
    """Gradient of sum(upstream * prediction) over a signal, per parameter."""
    samples = np.asarray(samples, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != samples.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != signal shape {samples.shape}")
    windows = _mlp_window_matrix(samples, config.input_size)
    hs = _mlp_hidden_states(params, config, windows, control)
    c = np.full(config.conditioning_dim, control)

    grads = MlpParams(
        layers=[
            MlpLayerParams(np.zeros_like(l.weights), np.zeros_like(l.bias), np.zeros_like(l.cond))
            for l in params.layers
        ],
        output_weights=np.zeros_like(params.output_weights),
        output_bias=np.zeros_like(params.output_bias),
    )
    dy = upstream[:, None]  # (T, 1)
    grads.output_weights[:] = dy.T @ hs[-1]
    grads.output_bias[:] = dy.sum(axis=0)
    dh = dy @ params.output_weights  # (T, units)
    for j in range(len(params.layers) - 1, -1, -1):
        da = dh * (1.0 - hs[j + 1] ** 2)
        grads.layers[j].weights[:] = da.T @ hs[j]
        grads.layers[j].bias[:] = da.sum(axis=0)
        grads.layers[j].cond[:] = da.sum(axis=0)[:, None] * c[None, :]
        if j > 0:
            dh = da @ params.layers[j].weights
    return grads


# ---------------------------------------------------------------------------
# Model files

def _arch_name(config) -> str:
    if isinstance(config, WaveNetConfig):
        return "wavenet"
    if isinstance(config, MlpConfig):
        return "mlp"
    raise ConfigError(f"unknown config type {type(config).__name__}")


def save_model(params, config, path) -> None:
    """Write magic, version, JSON header, then a float32 LE parameter blob."""
    header = {
        "arch": _arch_name(config),
        "config": config.to_dict(),
        "sample_rate_hz": config.sample_rate_hz,
        "control_range": list(CONTROL_RANGE),
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = flatten_params(params).astype("<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", MODEL_VERSION))
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write model file {path}: {exc}") from exc


def load_model(path):
    """Read a model file back; returns (params, config)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model file {path}: {exc}") from exc
    if len(raw) < 12:
        raise ModelFileError(f"{path}: truncated header")
    if raw[:4] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: bad magic {raw[:4]!r}")
    version, json_len = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported version {version}")
    if 12 + json_len > len(raw):
        raise ModelFileError(f"{path}: truncated config")
    try:
        header = json.loads(raw[12 : 12 + json_len].decode("utf-8"))
        arch = header["arch"]
        config_dict = header["config"]
    except (ValueError, KeyError) as exc:
        raise ModelFileError(f"{path}: malformed config JSON: {exc}") from exc
    blob = raw[12 + json_len :]
    if len(blob) % 4:
        raise ModelFileError(f"{path}: parameter blob length not a multiple of 4")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    try:
        if arch == "wavenet":
            config = WaveNetConfig.from_dict(config_dict)
            return wavenet_params_from_flat(config, flat), config
        if arch == "mlp":
            config = MlpConfig.from_dict(config_dict)
            return mlp_params_from_flat(config, flat), config
    except (TypeError, ConfigError) as exc:
        raise ModelFileError(f"{path}: invalid config: {exc}") from exc
    raise ModelFileError(f"{path}: unknown architecture {arch!r}")
