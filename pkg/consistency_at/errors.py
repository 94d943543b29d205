from typing import Any, Dict, Optional


class ConsistencyATError(Exception):
    """Base class for every failure raised by this package."""


class ConfigError(ConsistencyATError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NormNotSupportedError(ConsistencyATError, ValueError):
    pass


class AttackKindMismatchError(ConsistencyATError, ValueError):
    pass


class DatasetMissingError(ConsistencyATError):
    def __init__(self, path: str, expected_format: str):
        self.path = path
        self.expected_format = expected_format
        super().__init__(f"dataset not found at {path} (expected {expected_format})")


class CheckpointMismatchError(ConsistencyATError):
    pass


class NonFiniteLossError(ConsistencyATError):
    def __init__(self, config_hash: str, step: int, breakdown: Optional[Dict[str, Any]] = None):
        self.config_hash = config_hash
        self.step = step
        self.breakdown = breakdown or {}
        terms = ", ".join(f"{k}={v}" for k, v in self.breakdown.items())
        super().__init__(f"non-finite loss at step {step} (config {config_hash}): {terms}")


class OutputLockedError(ConsistencyATError):
    def __init__(self, lock_path: str):
        self.lock_path = lock_path
        super().__init__(f"{lock_path} exists; another run is using this output directory")
