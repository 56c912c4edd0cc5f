"""Multi-modal disease prediction with heterogeneous patient graphs and
correlation-guided attention fusion."""

__version__ = "0.1.0"
