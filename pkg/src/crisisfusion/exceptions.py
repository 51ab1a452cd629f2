"""Common base for all package errors so the CLI can report them uniformly."""


class CrisisFusionError(Exception):
    pass
