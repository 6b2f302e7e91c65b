"""Sparse-coding key-point detection."""
