"""featexport: CNN feature-map exporter for the concept evaluation toolkit."""

from .export import ExportError, ExportJob, export

__all__ = ["ExportError", "ExportJob", "export"]

__version__ = "0.1.0"
