"""Variational-autoencoder anomaly detection for hourly SCADA telemetry."""

__version__ = "0.1.0"
