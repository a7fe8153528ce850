"""Synthetic low-light video data via an intermediate long-exposure domain."""
