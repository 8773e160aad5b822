"""Exception hierarchy shared by the library, the CLI and the MCP tools."""


class JSENetError(Exception):
    """Base class for every error raised by jsenet."""


class ContractError(JSENetError, ValueError):
    """A pre- or post-condition of an operation does not hold."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class DegenerateGroupError(ContractError):
    """A grouped reduction received an empty index group."""


class InputError(JSENetError, ValueError):
    """A file or argument supplied by the user cannot be used."""


class TrainingDivergedError(JSENetError):
    """The training loss became non-finite."""

    def __init__(self, message: str, dump_path: str | None = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")
