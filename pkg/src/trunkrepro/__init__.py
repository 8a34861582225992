"""Tree of shallow networks that routes images from coarse supergroups to
individual categories, with the tooling needed to rebuild and audit it."""

__version__ = "0.1.0"
