"""Hierarchical orthogonal prototypes for generalized few-shot point-cloud segmentation.

Submodules: ``linalg`` (Gram-Schmidt, projection), ``net`` (MLPs with a
hand-written backward pass), ``hop_rep`` (prototype decomposition and the
orthogonality loss), ``hop_grad`` (base-gradient basis and projection),
``hop_ent`` (entropy regularizer), ``data``, ``trainer``, ``metrics``,
``io``, ``config``, ``ablation`` and ``cli``.
"""

__version__ = "0.1.0"
