"""Exception hierarchy; the CLI maps MsttsError to a one-line message and a
nonzero exit, so anything user-facing should raise one of these."""


class MsttsError(Exception):
    pass


class AudioFormatError(MsttsError):
    pass


class ConfigError(MsttsError):
    pass


class DataError(MsttsError):
    pass


class CheckpointError(MsttsError):
    pass


class UnknownSpeakerError(MsttsError):
    pass


class DivergenceError(MsttsError):
    """Training hit non-finite numbers; the last good checkpoint is kept."""
