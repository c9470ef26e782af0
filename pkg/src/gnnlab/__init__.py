"""gnnlab: desk-scale molecular GNN scaling experiments."""

__version__ = "0.1.0"
