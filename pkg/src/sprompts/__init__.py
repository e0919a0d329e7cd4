"""Independent per-domain prompt learning on frozen transformers for domain-incremental learning."""
__version__ = "0.1.0"
