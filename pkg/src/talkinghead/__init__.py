"""Face-conditioned speech and talking-head synthesis at desk scale."""

__version__ = "0.1.0"
