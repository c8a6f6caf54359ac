"""Lung nodule candidate pipeline.

Ingests CT volumes (MetaImage), produces and filters nodule candidates,
computes per-candidate slice-history images, classifies them with a small
from-scratch conv net to cut false positives, and scores candidate sets with
FROC/CPM. A deterministic phantom generator provides ground truth for
end-to-end verification.
"""

__version__ = "0.1.0"

from .errors import FormatError, NodulePipeError, ValidationError

__all__ = ["FormatError", "NodulePipeError", "ValidationError", "__version__"]
