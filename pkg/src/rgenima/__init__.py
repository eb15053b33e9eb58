"""Imaging-genetics pipeline: ROI tokens, SNP prompts, a micro multimodal transformer and attention stability."""

__version__ = "0.1.0"
