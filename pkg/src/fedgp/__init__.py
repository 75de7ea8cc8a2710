"""Energy-aware configuration and simulation of quantized federated SGD."""

__version__ = "0.1.0"
