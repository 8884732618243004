"""Exception hierarchy shared across trackmill."""


class TrackmillError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(TrackmillError, ValueError):
    """Invalid configuration value or combination of values."""


class ManifestParseError(TrackmillError, ValueError):
    """A manifest line could not be decoded."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class IntegrityError(TrackmillError, ValueError):
    """Data violates a structural invariant (duplicate frames, shape mismatch...)."""


class LabelsRequiredError(TrackmillError, ValueError):
    """An operation needs ground-truth person IDs on every frame."""


class FeasibilityError(TrackmillError, ValueError):
    """A simulation target cannot be realised on the given dataset."""


class DegenerateInputError(TrackmillError, ValueError):
    """Input is well-formed but mathematically degenerate (zero norm, all equal...)."""


class MiningError(TrackmillError, ValueError):
    """Triplet mining found an anchor without a positive or a negative."""


class TrainingError(TrackmillError, RuntimeError):
    """Training could not proceed (e.g. every tracklet was labelled noise)."""
