"""
fogpipe Core - the detection pipeline.

This package contains ingestion, windowing, image encoding, the numpy
network engine, training, federated simulation, evaluation and the CLI.
"""

__version__ = "0.3.0"
