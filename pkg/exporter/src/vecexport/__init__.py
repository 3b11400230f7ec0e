"""Encode corpus documents with a pretrained sentence encoder and write them in
the ranking engine's precomputed-vector file format."""

__version__ = "0.1.0"

from .export import ExportConfig, export_corpus  # noqa: F401
