"""xseg: superpixel segmentation and per-superpixel anomaly classification.

Library layout:

- imaging: multi-channel image containers and manifest I/O
- slic: hard SLIC over-segmentation
- softslic: differentiable soft clustering and its unrolled gradients
- features / net / losses / train: feature extraction and its training
- classifier: per-superpixel pooling and the binary anomaly classifier
- metrics / overlay / pipeline: evaluation harness and orchestration
- synth: synthetic dual-energy phantom generator
- cli: command-line entry point
"""

__version__ = "0.1.0"
