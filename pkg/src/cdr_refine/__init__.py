"""Joint sequence and backbone refinement of antibody CDR H1/H2/H3 loops with per-loop attention."""

__version__ = "0.1.0"
