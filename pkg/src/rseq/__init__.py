"""Sequence models built from windowed recurrence and causal attention, on a small numpy autodiff engine."""

__version__ = "0.1.0"
