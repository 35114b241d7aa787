"""Exception types shared across the package.

Every error knows which module owns it so the CLI can print a
module-qualified error name on failure.
"""


class PosedetError(Exception):
    """Base class for all errors raised by this package."""

    module = "posedet"

    @property
    def qualified_name(self) -> str:
        return f"{self.module}.{type(self).__name__}"


# --- annotation ingest ---

class MalformedAnnotation(PosedetError):
    module = "ingest"


class UnknownClass(PosedetError):
    module = "ingest"


class DegenerateBox(PosedetError):
    module = "ingest"


class ArityMismatch(PosedetError):
    module = "ingest"


class EmptyAfterClip(PosedetError):
    module = "ingest"


# --- target assignment ---

class IndivisibleInput(PosedetError):
    module = "targets"


class NonPositiveTarget(PosedetError):
    module = "targets"


# --- network ---

class ConfigMismatch(PosedetError):
    module = "network"


# --- losses ---

class NonFiniteLogit(PosedetError):
    module = "losses"


class NonPositiveDistance(PosedetError):
    module = "losses"


class ShapeMismatch(PosedetError):
    module = "losses"


# --- trainer ---

class CorpusEmpty(PosedetError):
    module = "trainer"


class DivergedLoss(PosedetError):
    module = "trainer"


# --- cli ---

class ConfigError(PosedetError):
    module = "cli"


class IoError(PosedetError):
    module = "cli"
