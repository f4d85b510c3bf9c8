"""Exception types shared across the package."""

from __future__ import annotations


class DivergenceError(FloatingPointError):
    """A parameter update produced a non-finite value."""

    def __init__(self, what: str, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite update of {what}{where}")
        self.what = what
        self.iteration = iteration


class ConfigError(ValueError):
    """Invalid or unknown configuration."""
