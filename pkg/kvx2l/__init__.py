"""kvx2l - bi-level KV cache compression with task-aware hybrid reload."""

__version__ = "0.1.0"
