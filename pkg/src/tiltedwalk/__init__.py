"""Area-tilted random walks, their ground-state chains and the diffusive limit."""
__version__ = "0.1.0"
