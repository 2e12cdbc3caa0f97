"""Fast retraining: SGD with random conv-layer freezing plus batch-by-batch
pseudoinverse refinement of the dense layers."""

__version__ = "0.1.0"
