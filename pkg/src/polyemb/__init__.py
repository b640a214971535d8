"""One-to-many instance embeddings for cross-modal retrieval.

A desk-scale numerical library: K-head attention encoders with hand-derived
backpropagation, a min-over-pairs ranking objective with diversity and
distribution-matching regularizers, set-to-set retrieval metrics, a binary
feature container, and a CLI tying them together.
"""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
