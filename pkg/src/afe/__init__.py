"""Two-branch image anomaly detection.

A reconstruction branch quantizes features against learned codebooks of
normal patterns and scores cosine reconstruction error; a structural
branch scores nearest-neighbor distance to a coreset memory bank of
normal patch features. Branch maps are z-score fused and smoothed.
"""

__version__ = "0.1.0"
