"""Multi-camera feature-based SLAM on bundled frames, with a synthetic test world."""

__version__ = "0.1.0"
