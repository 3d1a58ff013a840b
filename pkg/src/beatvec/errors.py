class DataError(Exception):
    """Bad or unusable input data (CLI exit code 3)."""


class MalformedFile(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class EmptySong(DataError):
    pass


class SongTooShort(DataError):
    pass


class OutOfRange(DataError, IndexError):
    pass


class InsufficientData(DataError):
    pass


class DegenerateSamples(DataError):
    pass


class EmptyInput(DataError):
    pass
