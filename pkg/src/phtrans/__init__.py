"""Self-training with a parallel hybrid CNN/shifted-window transformer for 3D abdominal organ segmentation."""
__version__ = "0.1.0"
