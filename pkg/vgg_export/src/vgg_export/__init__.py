from .exporter import ExportError, ExportReport, export

__all__ = ["ExportError", "ExportReport", "export"]
