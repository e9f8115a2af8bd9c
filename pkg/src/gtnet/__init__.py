"""GTNet: graph transformer network for point clouds, on a numpy autodiff core."""

__version__ = "0.1.0"
