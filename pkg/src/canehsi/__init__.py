"""Hyperspectral calibration, spectral analysis and rating classification of sugarcane leaves.

Submodules: hypercube, synthgen, calibration, segmentation, spectral,
patches, svm, resnet, pipeline, cli.  Nothing heavy is imported here so
the command-line entry point can pin BLAS threading before numpy loads.
"""

__version__ = "0.1.0"
