"""fracwave: desk-scale laboratory for the exterior inverse problem of the
fractional wave equation u_tt + (-Delta)^s u + q u = 0."""

__version__ = "0.1.0"
