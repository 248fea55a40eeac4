"""Retrieval-augmented imitation learning from human video memories.

Submodules: ``bank`` (memory store), ``midlevel`` (affordance masks and hand
trajectories), ``retriever`` (text embeddings + exact MIPS), ``encoders``
(memory tokens, token merging), ``nncore`` (forward/backward kernels),
``policy`` (fusion transformer + behaviour cloning), ``sim`` (tabletop
benchmark), ``cli`` / ``service`` (entry points).
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
