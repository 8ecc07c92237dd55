"""Non-intrusive load monitoring workbench: simulation, disaggregation, evaluation."""

__version__ = "0.1.0"
