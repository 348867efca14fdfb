"""INT8 quantization, compilation and cycle-approximate simulation for a
configurable multi-core CNN accelerator, plus the benchmark harness that
reports throughput, energy efficiency and device resource use."""

__version__ = "0.1.0"
