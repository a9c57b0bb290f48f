"""Multi-scale graph wavelet temporal convolution network for traffic forecasting.

Submodules: ``graph`` (topology, Laplacians), ``spectral`` (eigensolver,
wavelet bases), ``autodiff`` (tensors and reverse-mode gradients),
``model``, ``training``, ``data``, ``analysis`` and ``cli``.
"""

from .data import SpeedSeries, prepare, synth_generate
from .graph import Graph, build_graph, laplacian
from .model import Model, ModelConfig, load_checkpoint, new_model, save_checkpoint
from .spectral import WaveletBasis, chebyshev_wavelet, eig_sym, exact_wavelet
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Graph", "build_graph", "laplacian",
    "WaveletBasis", "eig_sym", "exact_wavelet", "chebyshev_wavelet",
    "Model", "ModelConfig", "new_model", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "train", "evaluate",
    "SpeedSeries", "synth_generate", "prepare",
]
