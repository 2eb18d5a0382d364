"""
Exception hierarchy for the Atlantis pipeline.

Every stage raises subclasses of PipelineError so the command line layer can map
them to exit codes without knowing the stage internals.
"""


class PipelineError(Exception):
    """
    Base class for all pipeline errors.
    """


class ConfigError(PipelineError):
    """
    Invalid or unresolvable configuration (exit code 2).
    """


class InvalidConfig(PipelineError):
    """
    Stage configuration violates its invariants.
    """


class InvalidRaster(PipelineError, ValueError):
    """
    Raster or depth map violates its type invariants.
    """


class MissingFile(PipelineError):
    pass


class UnsupportedFormat(PipelineError):
    pass


class NonRgb(PipelineError):
    pass


class IoFailure(PipelineError):
    pass


class RangeOverflow(PipelineError):
    pass


class MissingSidecar(PipelineError):
    pass


class CorruptSidecar(PipelineError):
    pass


class DuplicateId(PipelineError):
    pass


class ParseFailure(PipelineError):
    pass


class ManifestInvalid(PipelineError):
    pass


class BackendFailure(PipelineError):
    """
    A backend call failed. Carries the backend id and, when known, the item id.
    """

    def __init__(self, message: str, backend_id: str | None = None, item_id: str | None = None):
        self.reason = message
        self.backend_id = backend_id
        self.item_id = item_id
        details = ", ".join(
            part
            for part in (
                f"backend={backend_id}" if backend_id else "",
                f"item={item_id}" if item_id else "",
            )
            if part
        )
        super().__init__(f"{message} ({details})" if details else message)


class UnknownBackend(BackendFailure):
    pass


class EmptyCaption(PipelineError):
    pass


class EmptyInputDir(PipelineError):
    pass


class EmptyTriplets(PipelineError):
    pass


class CheckpointMismatch(PipelineError):
    pass


class NonPositiveThreshold(PipelineError):
    pass


class MissingConditioningDepth(PipelineError):
    pass


class MissingUncertainty(PipelineError):
    pass


class ShapeMismatch(PipelineError):
    pass


class EmptyValidSet(PipelineError):
    pass


class NonPositivePrediction(PipelineError):
    pass


class EmptyResults(PipelineError):
    pass


class DegenerateDepth(PipelineError):
    pass


class FitFailure(PipelineError):
    pass


class DemoCheckFailed(PipelineError):
    pass
