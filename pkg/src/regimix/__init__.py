"""Feature-gated linear/nonlinear regime unmixing for hyperspectral cubes."""

__version__ = "0.1.0"
