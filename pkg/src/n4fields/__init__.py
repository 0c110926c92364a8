"""Patch transforms built from a convolutional encoder and nearest-neighbour
annotation transfer, with training and boundary-benchmark evaluation."""

__version__ = "0.1.0"
