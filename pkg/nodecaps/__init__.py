"""
nodecaps - node classification with capsules routed over multi-hop graph filters.
"""

__version__ = "0.1.0"
