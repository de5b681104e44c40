"""Planning with learned granular-terrain predictors on a sand-slope simulator."""

__version__ = "0.1.0"
