"""Exception hierarchy shared by the pipeline modules."""


class MammoscreenError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(MammoscreenError):
    pass


class LengthMismatch(MammoscreenError, ValueError):
    pass


class WidthMismatch(MammoscreenError, ValueError):
    pass


class SingleClassDataset(MammoscreenError, ValueError):
    pass
