"""Objective evaluation: an ESR grid over input level and control setting.

Each test file is peak-normalized to the condition's level, processed
through the reference device at the condition's control to make the
target, then through each model under test. The headline metric is the
plain error-to-signal ratio aggregated as an energy-weighted mean over
files (identical to pooling the ratio over the concatenated test set);
the pre-emphasized variant is computed alongside.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import refdevice
from .errors import ConfigError, DatasetError, LeakageError
from .signal import AudioBuffer, pre_emphasis, read_wav

_LEVELS_DBFS = {"low": -12.0, "high": 0.0}


@dataclass(frozen=True)
class EvalCondition:
    input_level: str = "low"  # "low" (-12 dBFS peak) or "high" (0 dBFS peak)
    control: float = 0.5

    def __post_init__(self):
        if self.input_level not in _LEVELS_DBFS:
            raise ConfigError(f"input_level must be low or high, got {self.input_level!r}")
        if not 0.0 <= self.control <= 1.0:
            raise ConfigError(f"control must be in [0,1], got {self.control}")

    @property
    def peak(self) -> float:
        return 10.0 ** (_LEVELS_DBFS[self.input_level] / 20.0)

    @property
    def label(self) -> str:
        return f"{self.input_level}/{self.control:g}"


DEFAULT_CONDITIONS = (
    EvalCondition("low", 0.5),
    EvalCondition("low", 1.0),
    EvalCondition("high", 0.5),
    EvalCondition("high", 1.0),
)


@dataclass
class EsrReport:
    models: list
    conditions: list
    esr: np.ndarray  # (model, condition)
    esr_preemph: np.ndarray
    test_set_hash: str
    num_files: int = 0
    num_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "models": list(self.models),
            "conditions": [c.label for c in self.conditions],
            "esr": [[float(v) for v in row] for row in self.esr],
            "esr_preemph": [[float(v) for v in row] for row in self.esr_preemph],
            "test_set_hash": self.test_set_hash,
            "num_files": self.num_files,
            "num_samples": self.num_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _training_source_hashes(train_manifest) -> set:
    """Hashes of the clean source files recorded in a dataset directory."""
    manifest = Path(train_manifest)
    dataset_dir = manifest.parent if manifest.is_file() else manifest
    meta_path = dataset_dir / "dataset.json"
    hashes = set()
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        for name in meta.get("source_hashes", []):
            hashes.add(name)
    return hashes


def evaluate(
    models: dict,
    device: refdevice.TubeStageConfig,
    test_dir,
    conditions=DEFAULT_CONDITIONS,
    train_manifest=None,
) -> EsrReport:
    """ESR grid for `models` (name -> callable(AudioBuffer, control) ->
    AudioBuffer) over every condition.

    When train_manifest points at a dataset directory, test files whose
    content hash appears among the recorded training sources raise
    LeakageError.
    """
    test_dir = Path(test_dir)
    files = sorted(p for p in test_dir.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise DatasetError(f"no .wav files in {test_dir}")
    if not models:
        raise ConfigError("no models to evaluate")

    file_hashes = {p.name: _hash_file(p) for p in files}
    if train_manifest is not None:
        train_hashes = _training_source_hashes(train_manifest)
        leaked = [name for name, h in file_hashes.items() if h in train_hashes]
        if leaked:
            raise LeakageError(f"test files also in the training corpus: {leaked}")

    conditions = list(conditions)
    names = list(models.keys())
    num = np.zeros((len(names), len(conditions)))
    den = np.zeros(len(conditions))
    num_pe = np.zeros((len(names), len(conditions)))
    den_pe = np.zeros(len(conditions))
    total_samples = 0

    for path in files:
        clean = read_wav(path)
        total_samples += len(clean)
        peak = float(np.abs(clean.samples).max())
        if peak == 0.0:
            raise DatasetError(f"{path} is silent")
        for j, condition in enumerate(conditions):
            x = AudioBuffer(clean.samples * (condition.peak / peak), clean.sample_rate_hz)
            target = refdevice.process(device, refdevice.TubeStageState(), x, condition.control)
            t_pe = pre_emphasis(target).samples
            den[j] += float(target.samples @ target.samples)
            den_pe[j] += float(t_pe @ t_pe)
            for i, name in enumerate(names):
                pred = models[name](x, condition.control)
                err = target.samples - pred.samples
                num[i, j] += float(err @ err)
                err_pe = t_pe - pre_emphasis(pred).samples
                num_pe[i, j] += float(err_pe @ err_pe)

    digest = hashlib.sha256(
        json.dumps(sorted(file_hashes.items())).encode("utf-8")
    ).hexdigest()
    return EsrReport(
        models=names,
        conditions=conditions,
        esr=num / den[None, :],
        esr_preemph=num_pe / den_pe[None, :],
        test_set_hash=digest,
        num_files=len(files),
        num_samples=total_samples,
    )


def report_to_table(report: EsrReport) -> str:
    """Text table: rows are models, columns conditions; the lowest ESR per
    column is marked with '*' (ties all marked)."""
    if not report.models:
        raise ConfigError("empty report")
    labels = [c.label for c in report.conditions]
    col_mins = report.esr.min(axis=0)
    name_w = max(len("model"), max(len(m) for m in report.models))
    cells = []
    for i, model in enumerate(report.models):
        row = []
        for j in range(len(labels)):
            mark = "*" if report.esr[i, j] == col_mins[j] else " "
            row.append(f"{report.esr[i, j] * 100:.3f}%{mark}")
        cells.append(row)
    col_w = [max(len(labels[j]), max(len(r[j]) for r in cells)) for j in range(len(labels))]
    lines = [
        "  ".join(["model".ljust(name_w)] + [labels[j].rjust(col_w[j]) for j in range(len(labels))])
    ]
    for i, model in enumerate(report.models):
        lines.append(
            "  ".join([model.ljust(name_w)] + [cells[i][j].rjust(col_w[j]) for j in range(len(labels))])
        )
    return "\n".join(lines)
