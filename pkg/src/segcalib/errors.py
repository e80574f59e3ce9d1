"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
a distinct process status per category.
"""


class CalibrationError(Exception):
    exit_code = 1


class ParseError(CalibrationError):
    exit_code = 3

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnknownClassError(ParseError):
    exit_code = 4

    def __init__(self, class_id, line=None, path=None):
        self.class_id = class_id
        super().__init__(f"unknown class id {class_id}", line=line, path=path)


class DimensionMismatchError(CalibrationError):
    exit_code = 5


class NoValidPixelsError(CalibrationError):
    exit_code = 6


class DegenerateSceneError(CalibrationError):
    exit_code = 7


class InsufficientOverlapError(CalibrationError):
    exit_code = 8

    def __init__(self, message, group=None):
        self.group = group
        if group is not None:
            message = f"group {group}: {message}"
        super().__init__(message)


class ConfigError(CalibrationError):
    exit_code = 9
