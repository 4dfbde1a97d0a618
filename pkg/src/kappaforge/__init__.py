"""LLM-assisted content-analysis harness: prompts, gateway, extraction and agreement statistics."""

__version__ = "0.1.0"
