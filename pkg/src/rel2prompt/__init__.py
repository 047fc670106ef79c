"""Relational deep learning with graph prompts: tables → entity graph → GNN → soft prompt → decoder."""

__version__ = '0.1.0'
