"""Few-shot voice conversion toolkit.

Pipeline stages: mel analysis / Griffin-Lim synthesis (dsp), pitch tracking
and renormalization (pitch), synthetic parallel corpus construction (corpus),
speaker embeddings (embedder), the conversion network (model), training and
checkpointing (trainer), the inference chain (inference), and objective /
listening-test evaluation (evaluation).
"""

from voicefilter.errors import DataError, NumericalError, VoiceFilterError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "VoiceFilterError", "__version__"]
