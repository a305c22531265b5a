"""Chunk-based derandomized smoothing for executable-file classifiers.

Modules: ``pe_format`` (PE parse/rewrite), ``chunking`` (alignment and
splitting), ``classifiers`` (base models), ``smoothing`` (majority vote),
``certify`` (certificates and brute-force oracle), ``attacks`` (structure
preserving manipulations and GA), ``dataset`` (manifests, synthetic corpus).
"""

__version__ = "0.1.0"
