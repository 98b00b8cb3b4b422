"""Two-branch (left-to-right and right-to-left) phoneme decoding for multilingual lip reading."""

__version__ = "0.1.0"
