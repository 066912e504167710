class W3KitError(Exception):
    pass


class ConfigError(W3KitError, ValueError):
    """Raised for invalid shapes, widths or hyperparameters."""


class ShapeMismatchError(ConfigError):
    def __init__(self, message, expected=None, got=None):
        super().__init__(message)
        self.expected = expected
        self.got = got


class MissingPredictionError(W3KitError, KeyError):
    def __init__(self, clip_ids):
        self.clip_ids = sorted(clip_ids)
        super().__init__(self.clip_ids)

    def __str__(self):
        return "missing predictions for clip ids: " + ", ".join(map(str, self.clip_ids))


class TrainingDiverged(W3KitError, RuntimeError):
    pass
