"""Location-guided multichannel speech separation toolkit."""

__version__ = "0.1.0"
