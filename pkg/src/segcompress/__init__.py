"""Segmentation model compression under a byte budget."""
