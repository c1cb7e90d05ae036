class RdmaChannelError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RdmaChannelError, ValueError):
    pass


class FabricError(RdmaChannelError):
    pass


class RegistrationError(FabricError):
    pass


class WorkRequestError(FabricError):
    """A work request failed local validation and was never posted."""


class FabricConnectionError(FabricError):
    pass


class RingError(RdmaChannelError):
    pass


class ChannelError(RdmaChannelError):
    pass


class CacheError(RdmaChannelError):
    pass
