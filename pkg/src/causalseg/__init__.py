"""causalseg: style-disentangled 2D segmentation lab with test-time FiLM intervention."""

__version__ = "0.1.0"
