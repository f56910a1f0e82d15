class ExtractionError(Exception):
    """Base class for extractor failures."""


class NoFinalLayerFound(ExtractionError):
    """No candidate classifier head in the checkpoint."""


class AmbiguousLayer(ExtractionError):
    """Several candidate heads; auto mode refuses to guess."""

    def __init__(self, candidates):
        self.candidates = list(candidates)
        super().__init__(
            "multiple candidate heads, pass an explicit locator: "
            + ", ".join(self.candidates)
        )


class UnsupportedDtype(ExtractionError):
    """Tensor dtype that cannot be converted to float32."""


class MalformedCheckpoint(ExtractionError):
    """Checkpoint file cannot be parsed at all."""
