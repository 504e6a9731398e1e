"""
csg - cortical spectral graph parcellation.

Learns per-vertex parcel labels on triangulated surfaces by embedding each
surface graph in an aligned spectral domain and running Gaussian-kernel
graph convolutions there.
"""

__version__ = "0.3.0"
