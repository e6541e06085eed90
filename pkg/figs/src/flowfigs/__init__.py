"""Offline figure generation from solver run exports."""

from .render import KINDS, ExportError, FigureSpec, RenderResult, render

__all__ = ["KINDS", "ExportError", "FigureSpec", "RenderResult", "render"]
__version__ = "0.1.0"
