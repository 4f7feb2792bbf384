"""Dataset assembly, pre-emphasized ESR loss, Adam, and the epoch loop.

The loss is the error-to-signal ratio: squared error divided by target
energy, computed after running both target and prediction through the
1 - 0.95 z^-1 pre-emphasis filter (weighting high-frequency errors).
Training follows the segment pipeline: 100-ms segments, a uniform random
input gain in dB per segment, a uniform control draw per segment, and the
reference device applied from a fresh zero state.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import refdevice
from .errors import (
    ConfigError,
    DatasetError,
    NumericsError,
    ShapeError,
    SilentTargetError,
)
from .models import (
    MlpConfig,
    WaveNetConfig,
    flatten_params,
    init_mlp_params,
    init_wavenet_params,
    mlp_backward_signal,
    mlp_forward_signal,
    mlp_params_from_flat,
    wavenet_params_from_flat,
    _packed_backward,
    _packed_cache,
    TrainWorkspace,
)
from .signal import AudioBuffer, apply_gain_db, pre_emphasis, read_wav, segment, write_wav

PRE_EMPHASIS_COEFF = 0.95
# Segments whose pre-emphasized target energy falls below this are dropped
# at dataset build time; the ESR denominator would be degenerate.
SILENCE_ENERGY_FLOOR = 1e-10


@dataclass(frozen=True)
class TrainingExample:
    input: AudioBuffer
    control: float
    input_gain_db: float
    target: AudioBuffer

    def __post_init__(self):
        if len(self.input) != len(self.target):
            raise ShapeError("input and target lengths differ")
        if not 0.0 <= self.control <= 1.0:
            raise ConfigError(f"control must be in [0,1], got {self.control}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, n: int, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


@dataclass(frozen=True)
class TrainRunConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    pre_emphasis: bool = True
    loss_reduction: str = "mean"  # "mean" of per-segment ESRs or "pooled" energies
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.loss_reduction not in ("mean", "pooled"):
            raise ConfigError(f"unknown loss_reduction {self.loss_reduction!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def esr(target, prediction) -> float:
    """Error-to-signal ratio: sum((y - y_hat)^2) / sum(y^2)."""
    y = target.samples if isinstance(target, AudioBuffer) else np.asarray(target, dtype=np.float64)
    y_hat = (
        prediction.samples
        if isinstance(prediction, AudioBuffer)
        else np.asarray(prediction, dtype=np.float64)
    )
    if y.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    denom = float(np.sum(y * y))
    if denom <= 0.0:
        raise SilentTargetError("target signal has zero energy")
    return float(np.sum((y - y_hat) ** 2)) / denom


def _pre_emphasize_rows(rows: np.ndarray) -> np.ndarray:
    out = rows.copy()
    out[..., 1:] -= PRE_EMPHASIS_COEFF * rows[..., :-1]
    return out


def _pre_emphasis_adjoint_rows(grad: np.ndarray) -> np.ndarray:
    out = grad.copy()
    out[..., :-1] -= PRE_EMPHASIS_COEFF * grad[..., 1:]
    return out


def loss_and_grad(params, config, batch, run: TrainRunConfig | None = None, ws=None):
    """Mean pre-emphasized ESR over a batch plus gradients for every parameter.

    Dispatches on the config type: WaveNetConfig stacks the batch and runs
    one vectorized forward/backward; MlpConfig loops examples.
    """
    run = run or TrainRunConfig()
    if not batch:
        raise ConfigError("empty batch")
    lengths = {len(ex.input) for ex in batch}
    if len(lengths) != 1:
        raise ShapeError(f"batch mixes segment lengths: {sorted(lengths)}")

    targets = np.stack([ex.target.samples for ex in batch])  # (B, T)
    y_ref = _pre_emphasize_rows(targets) if run.pre_emphasis else targets
    denoms = np.sum(y_ref * y_ref, axis=1)
    if np.any(denoms <= 0.0):
        raise SilentTargetError("a batch target has zero energy after pre-emphasis")

    if isinstance(config, WaveNetConfig):
        loss, flat_grads = _wavenet_loss_and_grad(params, config, batch, y_ref, denoms, run, ws)
    elif isinstance(config, MlpConfig):
        loss, flat_grads = _mlp_loss_and_grad(params, config, batch, y_ref, denoms, run)
    else:
        raise ConfigError(f"unknown config type {type(config).__name__}")

    if not np.isfinite(loss) or not np.all(np.isfinite(flat_grads)):
        raise NumericsError(
            f"non-finite loss/gradient (parameter norm {np.linalg.norm(flatten_params(params)):.3e})"
        )
    return loss, flat_grads


def _residual_to_grad(residual: np.ndarray, denoms: np.ndarray, batch_size: int, run: TrainRunConfig):
    """Chain rule from per-row (possibly pre-emphasized) residuals back to
    the raw predictions."""
    if run.loss_reduction == "mean":
        d_ref = 2.0 * residual / denoms[:, None] / batch_size
    else:
        d_ref = 2.0 * residual / denoms.sum()
    return _pre_emphasis_adjoint_rows(d_ref) if run.pre_emphasis else d_ref


def _batch_loss(residual: np.ndarray, denoms: np.ndarray, run: TrainRunConfig) -> float:
    per_row = np.sum(residual * residual, axis=1)
    if run.loss_reduction == "mean":
        return float(np.mean(per_row / denoms))
    return float(per_row.sum() / denoms.sum())


def _wavenet_loss_and_grad(params, config, batch, y_ref, denoms, run, ws=None):
    x = np.stack([ex.input.samples for ex in batch])  # (B, T)
    controls = np.array([ex.control for ex in batch])
    pred, cache = _packed_cache(params, config, x, controls, keep=True, ws=ws)
    pred_ref = _pre_emphasize_rows(pred) if run.pre_emphasis else pred
    residual = pred_ref - y_ref
    loss = _batch_loss(residual, denoms, run)
    d_pred = _residual_to_grad(residual, denoms, len(batch), run)
    grads = _packed_backward(params, config, cache, d_pred)
    return loss, flatten_params(grads)


def _mlp_loss_and_grad(params, config, batch, y_ref, denoms, run):
    flat_grads = None
    nums = np.empty(len(batch))
    for i, ex in enumerate(batch):
        pred = mlp_forward_signal(params, config, ex.input.samples, ex.control)
        pred_ref = _pre_emphasize_rows(pred[None])[0] if run.pre_emphasis else pred
        residual = pred_ref - y_ref[i]
        nums[i] = float(residual @ residual)
        if run.loss_reduction == "mean":
            d_ref = 2.0 * residual / denoms[i] / len(batch)
        else:
            d_ref = 2.0 * residual / denoms.sum()
        d_pred = _pre_emphasis_adjoint_rows(d_ref[None])[0] if run.pre_emphasis else d_ref
        g = flatten_params(mlp_backward_signal(params, config, ex.input.samples, ex.control, d_pred))
        flat_grads = g if flat_grads is None else flat_grads + g
    if run.loss_reduction == "mean":
        loss = float(np.mean(nums / denoms))
    else:
        loss = float(nums.sum() / denoms.sum())
    return loss, flat_grads


def adam_step(params_flat: np.ndarray, grads_flat: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam update; mutates the moment buffers, returns new parameters."""
    if params_flat.shape != grads_flat.shape or params_flat.shape != state.m.shape:
        raise ShapeError("parameter, gradient, and moment shapes must match")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads_flat
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads_flat**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params_flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Dataset pipeline

def build_dataset(
    clean_dir,
    out_dir,
    device: refdevice.TubeStageConfig,
    seed: int,
    segment_ms: float = 100.0,
    gain_range_db: tuple = (-15.0, 15.0),
) -> Path:
    """Cut a clean corpus into segments, drive the reference device, and
    write input/target WAV pairs plus a JSONL manifest.

    Per segment: a uniform random input gain in dB, a uniform control draw,
    and a fresh device state. Near-silent segments are dropped (degenerate
    loss denominator). Deterministic per seed. Returns the manifest path.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    files = sorted(p for p in clean_dir.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise DatasetError(f"no .wav files in {clean_dir}")
    rng = np.random.default_rng(seed)
    lo, hi = gain_range_db

    (out_dir / "inputs").mkdir(parents=True, exist_ok=True)
    (out_dir / "targets").mkdir(parents=True, exist_ok=True)

    sample_rate = None
    entries = []
    index = 0
    for path in files:
        buf = read_wav(path)
        if sample_rate is None:
            sample_rate = buf.sample_rate_hz
        elif buf.sample_rate_hz != sample_rate:
            raise DatasetError(
                f"{path} is {buf.sample_rate_hz} Hz, corpus started at {sample_rate} Hz"
            )
        for seg in segment(buf, segment_ms):
            gain_db = float(rng.uniform(lo, hi))
            control = float(rng.uniform(0.0, 1.0))
            x = apply_gain_db(seg, gain_db)
            y = refdevice.process(device, refdevice.TubeStageState(), x, control)
            pe_energy = float(np.sum(pre_emphasis(y).samples ** 2))
            if pe_energy < SILENCE_ENERGY_FLOOR:
                continue
            in_rel = f"inputs/seg_{index:06d}.wav"
            tg_rel = f"targets/seg_{index:06d}.wav"
            write_wav(x, out_dir / in_rel, "float32")
            write_wav(y, out_dir / tg_rel, "float32")
            entries.append(
                {
                    "input_path": in_rel,
                    "target_path": tg_rel,
                    "control": control,
                    "input_gain_db": gain_db,
                    "sample_rate": sample_rate,
                    "source": path.name,
                }
            )
            index += 1
    if not entries:
        raise DatasetError("corpus produced no usable segments")

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(out_dir / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "device": device.to_dict(),
                "sample_rate": sample_rate,
                "segment_ms": segment_ms,
                "gain_range_db": [lo, hi],
                "seed": seed,
                "num_segments": len(entries),
                "sources": [p.name for p in files],
                "source_hashes": [hashlib.sha256(p.read_bytes()).hexdigest() for p in files],
            },
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    return manifest


def load_manifest(dataset_dir):
    """Read every manifest entry into memory; returns (examples, sources)."""
    dataset_dir = Path(dataset_dir)
    manifest = dataset_dir / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"no manifest.jsonl in {dataset_dir}")
    examples = []
    sources = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            entry = json.loads(line)
            examples.append(
                TrainingExample(
                    input=read_wav(dataset_dir / entry["input_path"]),
                    control=entry["control"],
                    input_gain_db=entry["input_gain_db"],
                    target=read_wav(dataset_dir / entry["target_path"]),
                )
            )
            sources.append(entry.get("source", entry["input_path"]))
    return examples, sources


def split_by_source(examples, sources, val_fraction: float, seed: int):
    """Split train/validation on source-file boundaries (no segment leakage)."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0,1), got {val_fraction}")
    unique = sorted(set(sources))
    if len(unique) < 2:
        raise ConfigError("need at least two source files to split by source")
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(unique))
    n_val = max(1, int(round(val_fraction * len(unique))))
    val_sources = set(shuffled[:n_val])
    train = [ex for ex, src in zip(examples, sources) if src not in val_sources]
    val = [ex for ex, src in zip(examples, sources) if src in val_sources]
    if not train or not val:
        raise ConfigError("split left train or validation empty")
    return train, val


def _init_params_for(config, seed: int):
    if isinstance(config, WaveNetConfig):
        return init_wavenet_params(config, seed)
    if isinstance(config, MlpConfig):
        return init_mlp_params(config, seed)
    raise ConfigError(f"unknown config type {type(config).__name__}")


def _params_from_flat_for(config, flat):
    if isinstance(config, WaveNetConfig):
        return wavenet_params_from_flat(config, flat)
    return mlp_params_from_flat(config, flat)


def validation_loss(params, config, examples, run: TrainRunConfig, ws=None) -> float:
    """Mean pre-emphasized ESR over a set, computed without gradients."""
    if not examples:
        raise ConfigError("empty validation set")
    per_segment = []
    for start in range(0, len(examples), run.batch_size):
        chunk = examples[start : start + run.batch_size]
        targets = np.stack([ex.target.samples for ex in chunk])
        y_ref = _pre_emphasize_rows(targets) if run.pre_emphasis else targets
        denoms = np.sum(y_ref * y_ref, axis=1)
        if np.any(denoms <= 0.0):
            raise SilentTargetError("a validation target has zero energy")
        if isinstance(config, WaveNetConfig):
            x = np.stack([ex.input.samples for ex in chunk])
            controls = np.array([ex.control for ex in chunk])
            pred, _ = _packed_cache(params, config, x, controls, keep=False, ws=ws)
        else:
            pred = np.stack(
                [mlp_forward_signal(params, config, ex.input.samples, ex.control) for ex in chunk]
            )
        pred_ref = _pre_emphasize_rows(pred) if run.pre_emphasis else pred
        per_segment.extend(np.sum((pred_ref - y_ref) ** 2, axis=1) / denoms)
    return float(np.mean(per_segment))


def train(
    train_examples,
    val_examples,
    config,
    run: TrainRunConfig,
    log_path=None,
    progress=None,
):
    """Fit a model; returns (best parameters, per-epoch log).

    One epoch is a shuffled pass over the training segments. The returned
    parameters are the ones with the lowest validation loss; the loop stops
    when validation has not improved for `patience` epochs (at least one)
    or at max_epochs.
    """
    if not train_examples:
        raise ConfigError("empty training set")
    if not val_examples:
        raise ConfigError("empty validation set")
    params = _init_params_for(config, run.seed)
    flat = flatten_params(params)
    adam = AdamState.for_size(flat.size, lr=run.learning_rate)
    rng = np.random.default_rng(run.seed)

    ws = TrainWorkspace()
    val_ws = TrainWorkspace()
    best_val = np.inf
    best_flat = flat.copy()
    epochs_since_best = 0
    log = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, run.max_epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(len(train_examples))
            epoch_num = 0.0
            epoch_den = 0
            for batch_start in range(0, len(order), run.batch_size):
                idx = order[batch_start : batch_start + run.batch_size]
                batch = [train_examples[i] for i in idx]
                params = _params_from_flat_for(config, flat)
                try:
                    loss, grads = loss_and_grad(params, config, batch, run, ws=ws)
                except NumericsError as exc:
                    raise NumericsError(
                        f"epoch {epoch}, batch {batch_start // run.batch_size}: {exc}"
                    ) from exc
                flat = adam_step(flat, grads, adam)
                epoch_num += loss * len(batch)
                epoch_den += len(batch)
            params = _params_from_flat_for(config, flat)
            val = validation_loss(params, config, val_examples, run, ws=val_ws)
            entry = {
                "epoch": epoch,
                "train_loss": epoch_num / epoch_den,
                "val_loss": val,
                "wall_seconds": time.perf_counter() - started,
            }
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
            if val < best_val:
                best_val = val
                best_flat = flat.copy()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= max(run.patience, 1):
                    break
    finally:
        if log_fh:
            log_fh.close()
    return _params_from_flat_for(config, best_flat), log
