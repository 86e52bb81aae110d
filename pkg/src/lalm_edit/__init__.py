"""Locate-then-edit laboratory for a toy audio-language model."""
