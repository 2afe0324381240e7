"""Motion-guided decomposition of motion-blurred images into sharp frame sequences."""

__version__ = "0.1.0"
