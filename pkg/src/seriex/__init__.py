"""Low-bit series-expansion quantization."""
