class UfoError(Exception):
    """Base class for framework errors."""


class CoreError(UfoError):
    """Lifecycle misuse: double init, calls after shutdown, a dead service."""


class UfoFreed(UfoError):
    pass


class UfoPoisoned(UfoError):
    """The object's population failed; every later call reports the stored error."""

    def __init__(self, object_id: int, reason: str):
        super().__init__(f"object {object_id} is poisoned: {reason}")
        self.object_id = object_id
        self.reason = reason

    def __reduce__(self):
        return (type(self), (self.object_id, self.reason))


class NestedUfoAccess(UfoError):
    """A population function touched unmaterialized object memory."""


class PopulateFailed(UfoError):
    pass


class UnresolvableFault(UfoError):
    pass
