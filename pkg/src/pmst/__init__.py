"""Parameter-efficient multilingual speech translation on a frozen translation backbone."""

__version__ = "0.1.0"
