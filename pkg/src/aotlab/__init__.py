"""Multi-stream Fourier neural operator lab: model, synthetic PDE data,
training loop, and diagnostics, all on numpy."""

__version__ = "0.1.0"
