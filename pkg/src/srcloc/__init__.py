"""Diffusion-based propagation source localization on graphs.

The pipeline: simulate cascades on a graph, compute an LPSI structural prior
for each observation, and train a graph denoiser whose reverse diffusion
starts at that prior.
"""

__version__ = "0.1.0"
