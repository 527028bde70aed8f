"""Exception hierarchy shared by the library and the CLI.

Every error carries an ``exit_code`` so the CLI can map it without a
lookup table: data and format problems exit with 2, argument problems
with 1.
"""


class SignShieldError(Exception):
    exit_code = 2


class InputShapeError(SignShieldError, ValueError):
    pass


class LabelError(SignShieldError, ValueError):
    pass


class DataError(SignShieldError, ValueError):
    pass


class FormatError(SignShieldError, ValueError):
    """Malformed file. ``offset`` is the byte position where decoding failed."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class SizeError(SignShieldError, ValueError):
    pass


class ClassNameError(SignShieldError, ValueError):
    pass


class StratificationError(SignShieldError, ValueError):
    pass


class ParameterError(SignShieldError, ValueError):
    exit_code = 1


class ArgumentError(SignShieldError, ValueError):
    exit_code = 1
