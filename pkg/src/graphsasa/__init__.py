"""Snapshot-based graph recommendation with test-time sparse augmentation
and low-rank singular adaptation of a frozen embedding matrix."""

__version__ = "0.1.0"
