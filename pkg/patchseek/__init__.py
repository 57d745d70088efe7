"""Objectness-guided feature slicing and sparse detection head scheduling."""
