"""Traffic-speed forecasting with a CNN baseline and a capsule network, on a small numpy autodiff core."""

__version__ = "0.1.0"
