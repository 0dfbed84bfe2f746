"""Two-stage emotional adaptation of an audio-driven keypoint talking head on a synthetic world."""

__version__ = "0.1.0"
