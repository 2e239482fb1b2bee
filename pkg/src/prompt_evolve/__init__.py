"""Parameterized prompts, prompt fusion and a synthetic incremental-detection harness."""

__version__ = "0.1.0"
