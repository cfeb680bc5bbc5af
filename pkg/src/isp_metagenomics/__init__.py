"""Streaming k-mer metagenomics pipeline with an in-storage-processing SSD model."""

__version__ = "0.1.0"
