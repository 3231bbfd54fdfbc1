"""Exception hierarchy.

Every error carries a module tag and a short machine code so the CLI can emit
``ERROR:<module>:<code>: <message>`` lines.
"""


class EpinetError(Exception):
    module = "epinet"
    code = "error"

    def __init__(self, message, *, module=None, code=None):
        super().__init__(message)
        if module is not None:
            self.module = module
        if code is not None:
            self.code = code

    def line(self):
        msg = " ".join(str(self).split())
        return f"ERROR:{self.module}:{self.code}: {msg}"


class DimensionError(EpinetError, ValueError):
    code = "dimension"


class DTypeError(EpinetError, TypeError):
    code = "dtype"


class ConfigError(EpinetError, ValueError):
    code = "config"


class ContractError(EpinetError, RuntimeError):
    code = "contract"


class NonFiniteError(EpinetError, FloatingPointError):
    code = "nonfinite"


class CheckpointError(EpinetError, IOError):
    module = "net"
    code = "checkpoint"

    def __init__(self, message, offset=None, **kw):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, **kw)
        self.offset = offset


class PackingError(EpinetError, ValueError):
    module = "patchwork"
    code = "packing"

    def __init__(self, message, required=None, **kw):
        super().__init__(message, **kw)
        self.required = required


class RangeError(EpinetError, IndexError):
    code = "range"
