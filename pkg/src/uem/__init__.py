"""Event-level video retrieval engine.

Pipeline: encode per-frame and per-token features into a shared space,
stream frames into variable-length events with a similarity threshold,
refine the query's best-matching event with cross-attention, and rank a
corpus by the cosine between the refined event and the query embedding.
Everything trains with a small reverse-mode autodiff core on numpy.
"""

__version__ = "0.1.0"
