"""Otoscopy video screening: eardrum detection plus shift-contrastive anomaly
detection with a synthetic benchmark standing in for clinical data."""

__version__ = "0.1.0"
