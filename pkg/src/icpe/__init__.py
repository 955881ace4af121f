"""Few-shot object detection with query-conditioned prototypes, built on a
small numpy autodiff engine and a synthetic shape world."""

__version__ = "0.1.0"
