"""Skeleton-guided attention fusion for activity recognition.

Two branches share one label: a spatiotemporal graph-convolution network
reads joint-coordinate sequences, and a small residual image net reads a
square grid of body-part crops sampled from the video.  Per-joint
importance extracted from the graph branch reweights the grid before the
image branch sees it; predictions are trained jointly and ensembled.
"""

__version__ = "0.1.0"
