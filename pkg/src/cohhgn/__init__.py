"""Pseudo-session next-item recommendation with heterogeneous hypergraphs
and global co-occurrence graphs (CoHHGN+)."""

__version__ = "0.1.0"
