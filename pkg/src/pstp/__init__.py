"""Question-guided temporal and spatial selection for audio-visual question answering."""

__version__ = "0.1.0"

from pstp.config import ModelConfig, SynthSpec, TrainConfig  # noqa: E402
from pstp.estimator import PSTPClassifier  # noqa: E402
from pstp.model import PSTPNet  # noqa: E402

__all__ = ["ModelConfig", "SynthSpec", "TrainConfig", "PSTPNet", "PSTPClassifier", "__version__"]
