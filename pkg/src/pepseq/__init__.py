"""Desk-scale de novo peptide sequencing.

A from-scratch hybrid of an autoregressive and a non-autoregressive
transformer decoder over a shared spectrum encoder, trained with a
cross-entropy/CTC mixture and fine-tuned with cross-decoder attention,
plus mass-constrained CTC decoding and sequence-level evaluation.
"""

__version__ = "0.1.0"
