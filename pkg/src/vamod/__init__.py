"""vamod: black-box virtual-analog modeling toolkit.

Fits a conditioned feedforward WaveNet (and an MLP baseline) to a nonlinear
audio circuit and runs the result in batch or sample-by-sample streaming
mode. The ground-truth circuit is a fully specified synthetic tube stage.
"""

from .signal import AudioBuffer, read_wav, write_wav, pre_emphasis, apply_gain_db, segment, sine
from .refdevice import TubeStageConfig, TubeStageState, process, analyze_transient

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "read_wav",
    "write_wav",
    "pre_emphasis",
    "apply_gain_db",
    "segment",
    "sine",
    "TubeStageConfig",
    "TubeStageState",
    "process",
    "analyze_transient",
    "__version__",
]
