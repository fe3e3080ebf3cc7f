"""W4A8 quantization toolkit and software mixed-precision GEMM engines."""

__version__ = "0.1.0"
