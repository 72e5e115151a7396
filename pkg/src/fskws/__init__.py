"""Few-shot open-set keyword spotting with auxiliary supervised learning."""

__version__ = "0.1.0"
