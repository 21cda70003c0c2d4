"""Cross-lingual masked language model pre-training on n-gram translation tables, at desk scale."""

__version__ = "0.1.0"
