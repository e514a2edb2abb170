"""Person-job matching pipeline with two-tower content and history models."""

__version__ = "0.1.0"
