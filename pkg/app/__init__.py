"""Selektor: selective inference after model selection."""
