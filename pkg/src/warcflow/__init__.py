"""warcflow: stream filtered web-archive records to a batching consumer.

Producer workers parse WARC files, run filter stages, and send surviving
records over a framed TCP protocol with credit-based flow control. The
consumer interleaves producer streams, forms batches, scores them with a
pluggable model, and persists results with content-addressed payloads.
"""

__version__ = "0.1.0"


class WarcflowError(Exception):
    """Base class for every error this package raises deliberately."""
