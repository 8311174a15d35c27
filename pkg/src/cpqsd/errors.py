"""Exception types shared across the package.

Exit-code mapping for the command line lives in cli.py: ParameterError -> 2,
ResolutionError -> 3. Everything else is a plain bug and may propagate.
"""


class ParameterError(ValueError):
    """A config value is outside its documented range, or inconsistent."""


class ResolutionError(RuntimeError):
    """A statistical procedure ran out of resolution (population collapse,
    all-zero counts where a positive estimate is required, fit impossible)."""


class CensoredError(RuntimeError):
    """A window-truncated query touched the boundary, so the answer would be
    silently wrong rather than approximate."""
