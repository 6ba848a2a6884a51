"""Post-training quantization with twin uniform codes and a Hessian-guided search."""

__version__ = "0.1.0"
