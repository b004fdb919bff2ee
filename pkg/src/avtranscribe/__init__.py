"""Audio-visual transcription of long recordings: features, model, alignment, evaluation."""

__version__ = "0.1.0"
