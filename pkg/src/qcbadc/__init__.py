"""Design and simulation toolkit for quadrature control-bounded A/D converters."""

__version__ = "0.1.0"
