from typing import Optional


class ConfigError(ValueError):
    """Raised for invalid training/render configuration. Maps to exit code 2."""


class DataError(ValueError):
    """Raised for missing or inconsistent input data. Maps to exit code 3."""


class FormatError(DataError):
    """
    Raised when a file does not follow its documented format.

    Attributes:
        path (str): The file being parsed.
        offset (int, optional): Byte offset where parsing failed, if known.
    """

    def __init__(self, message: str, path: str = "", offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        location = f" at byte {offset}" if offset is not None else ""
        prefix = f"{path}{location}: " if path else (f"byte {offset}: " if offset is not None else "")
        super().__init__(prefix + message)


class StaleStateError(RuntimeError):
    """Raised when a BVH or frame no longer matches the GaussianSet it was built from."""


class NumericalError(ArithmeticError):
    """
    Raised when training produces a non-finite value. Maps to exit code 4.

    Attributes:
        step (int): The optimization step where the failure occurred.
    """

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")
