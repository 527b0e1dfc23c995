"""Matrix completion for panels whose missingness follows treatment adoption."""

__version__ = "0.1.0"
