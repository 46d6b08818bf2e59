class AdvCLToolkitError(Exception):
    """Base exception for the AdvCL toolkit."""
    pass

class ConfigurationError(AdvCLToolkitError):
    """Exception raised for errors in configuration (unknown dataset, incompatible checkpoint, bad keys)."""
    pass

class ValidationError(AdvCLToolkitError):
    """Exception raised when a tensor or argument violates its declared contract."""
    pass

class ArtifactIOError(AdvCLToolkitError):
    """Exception raised when a dataset, checkpoint or table cannot be read or written."""
    pass

class StateError(AdvCLToolkitError):
    """Exception raised when an operation is called in the wrong state (e.g. no classifier head attached)."""
    pass

class AttackError(AdvCLToolkitError):
    """Exception raised when a PGD attack produces a non-finite gradient."""
    pass

class ClusteringError(AdvCLToolkitError):
    """Exception raised when k-means breaks one of its invariants."""
    pass

class TrainingError(AdvCLToolkitError):
    """Exception raised when a training loop hits a non-finite loss or attack gradient."""

    def __init__(self, message: str, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
