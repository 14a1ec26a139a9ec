"""Relational table learning with foreign-key graphs and the BRIDGE model."""
