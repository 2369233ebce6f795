"""memvos: long-term video object segmentation with three fixed-size memory banks.

Subpackages cover the full loop: synthetic long-video generation, dataset IO,
the segmentation model and its recurrent memory compressor, training,
J/F evaluation with oracle and memory-bank ablations, and the semi-automatic
annotation pipeline. `memvos --help` lists the command-line entry points.
"""

__version__ = "0.1.0"
