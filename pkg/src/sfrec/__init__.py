"""Slow-fast collaborative recommendation at desk scale.

A small numpy library that pairs a cloud-side attention recommender with an
on-device dual-GRU model, exchanging compact interest vectors over a binary
wire format.  See the README for the tour.
"""

__version__ = "0.1.0"
