"""Cross-modal retrieval toy lab.

High-frequency patch mining over a Haar decomposition, a small part-based
vision transformer with an EMA shadow copy, multimodal prototype banks, and
the hierarchical contrastive objective stack, trained end to end on a
synthetic dual-modality identity dataset.
"""

__version__ = "0.1.0"
