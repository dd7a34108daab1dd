"""
AUIF: unrolled two-scale decomposition network for infrared/visible image fusion.
"""
__version__ = "1.0.0"
