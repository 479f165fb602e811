"""Figure rendering for hwqueue reports.

Reads only the exported CSV/JSON reports (never raw path recordings), so the
simulation package runs fine without this one and vice versa.
"""

from .render import FigureSpec, SchemaError, render

__version__ = "0.1.0"
