"""Audiovisual affect regression: CNN features, MI-based selection, kernel SVR."""

from . import metrics, mrmr, network, ops, streams, svr

__all__ = ["metrics", "mrmr", "network", "ops", "streams", "svr"]
__version__ = "0.1.0"
