"""Target speaker verification on multi-talker speech, in numpy.

Modules: ``autodiff`` (reverse-mode tape), ``dsp`` (audio, SI-SDR, spectra),
``attention`` and ``representation`` (the two trainable networks),
``training`` (losses and stages), ``backend`` (LDA/PLDA/s-norm/metrics),
``pipeline`` (end-to-end system) and ``cli``.
"""

from .attention import AttentionConfig, AttentionParams, forward_attention
from .config import ExperimentConfig, load_config, profile
from .pipeline import TsvSystem
from .representation import RepresentationConfig, RepresentationParams

__all__ = ["AttentionConfig", "AttentionParams", "forward_attention", "ExperimentConfig",
           "load_config", "profile", "TsvSystem", "RepresentationConfig", "RepresentationParams"]
__version__ = "0.1.0"
