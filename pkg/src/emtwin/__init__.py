"""Neural wireless digital twin: ray tracing, EM oracle and learned interaction models."""
__version__ = "0.1.0"
