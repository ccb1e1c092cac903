"""eguide: surface-electrode microwave guide and beam splitter simulations."""

__version__ = "0.1.0"
