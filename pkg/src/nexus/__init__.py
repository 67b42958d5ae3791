"""Prompt-guided diffusion adapters at toy scale, with an analytic complexity accountant."""

__version__ = "0.1.0"
