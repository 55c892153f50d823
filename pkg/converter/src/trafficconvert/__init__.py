"""Archive-to-CSV converter for the fedtraffic simulator."""

__version__ = "0.1.0"

from .convert import ConversionError, ConversionReport, ConversionSpec, convert, convert_adjacency, convert_series
