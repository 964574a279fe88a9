"""Audio-visual target-speaker diarization toolkit.

Synthesizes multi-speaker audio-visual conversations, trains a
multi-modal target-speaker voice activity model, runs the staged
diarization pipeline, and scores results against references.
"""

__version__ = "0.1.0"

from avdiar.errors import AvdiarError, DataError, NumericalError, UsageError

__all__ = ["AvdiarError", "DataError", "NumericalError", "UsageError", "__version__"]
