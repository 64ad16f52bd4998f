"""LLM-derived recent and global temporal semantics for dynamic text-attributed graphs."""

__version__ = "0.1.0"
