"""Temporal-feedback CRNN for raw-waveform keyword spotting."""
__version__ = "0.1.0"
