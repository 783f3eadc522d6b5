"""Dynamic cross-modal tokenization at desk scale.

A small research stack: differentiable adaptive token boundaries, a
hierarchical encoder with top-down refinement, contrastive cross-modal
alignment, a synthetic scene/caption corpus, and evaluation metrics that
compare model attention against reference alignment.
"""

__version__ = "0.1.0"
