"""Compressed-domain video action recognition at desk scale.

A self-contained toolkit: a lossless toy block-matching codec produces
I-frames, motion vectors and residuals; motion vectors are back-traced
into accumulated P-frames; a spiking temporal modulator and a unified
space-time-modality transformer learn action classes from those signals;
and a 45nm energy model accounts for the cost of it all.
"""

__version__ = "0.1.0"
