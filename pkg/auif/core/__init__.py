"""
Core numerics: tensor primitives, decomposition, network, training, fusion and metrics.
"""
