"""Garment animation through virtual bones: skin-rig extraction, motion networks and parameter blending."""

__version__ = "0.1.0"
