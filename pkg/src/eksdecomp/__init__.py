"""Knowledge decomposition of a dense CNN into a shared backbone plus low-rank task experts."""

__version__ = "0.1.0"
