"""Resource-constrained differentiable architecture search at desk scale.

A cell-based supernet with softmax-mixed candidate operations is trained
by alternating weight/architecture descent; a differentiable cost model
over parameter count and FLOPs keeps the architecture inside a
user-defined cost box via iterative projection.
"""

__version__ = "0.1.0"
