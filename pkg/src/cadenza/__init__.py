"""Contrastive audio-video embeddings for music-video segments.

Projection heads are trained over precomputed backbone features with a
bidirectional contrastive loss and evaluated with cross-modal median rank,
downstream probes and similarity analyses.
"""

__version__ = "0.1.0"
