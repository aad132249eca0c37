"""
fogpipe - Freezing-of-gait detection from accelerometer recordings.

Converts triaxial accelerometer windows into Gramian angular field images,
trains small convolutional classifiers (centrally or through simulated
federated rounds) and evaluates them at window and episode level.
"""

from fogpipe.core import __version__

__all__ = ["__version__"]
