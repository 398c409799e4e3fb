"""conceptprobe: build and evaluate concept-based explanations of classifiers.

Pipeline pieces: embedding ingestion (store), concept direction learning
(cav), the projection bottleneck and linear classifier (bottleneck),
per-concept activation heatmaps (coam), alignment metrics CGIM/CEM/CLM
(metrics), a planted-concept synthetic generator (synth), and a CLI tying
the stages together through the filesystem (cli).
"""

from .tensor import Tensor, cosine, gap, rank_desc

__all__ = ["Tensor", "cosine", "gap", "rank_desc"]

__version__ = "0.1.0"
