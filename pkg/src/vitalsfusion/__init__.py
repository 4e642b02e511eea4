"""Face and finger video vitals: synchronized ingest, a dual-stream 3D-conv
network for BVP and SpO2, training, evaluation and a synthetic data generator."""

__version__ = "0.1.0"
