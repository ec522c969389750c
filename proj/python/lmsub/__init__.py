"""Adaptive LM subroutines for public comment analysis."""

from ._lmsub import (
    LmsubError,
    beta_at,
    demo_bandit,
    distribution,
    evaluate,
    export_run,
    rare_letters_oracle,
    run,
    trace,
)

__all__ = [
    "LmsubError",
    "beta_at",
    "demo_bandit",
    "distribution",
    "evaluate",
    "export_run",
    "rare_letters_oracle",
    "run",
    "trace",
]
