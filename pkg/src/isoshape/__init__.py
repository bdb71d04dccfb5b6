"""isoshape: isometry- and almost-isometry-invariant point-cloud representation
learning at desk scale, with statistically verified transformation samplers."""

__version__ = "0.1.0"
