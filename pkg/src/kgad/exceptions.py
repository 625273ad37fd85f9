"""Exception hierarchy for kgad."""


class KgadError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(KgadError, ValueError):
    pass


class InvalidArgument(KgadError, ValueError):
    pass


class InvalidState(KgadError, RuntimeError):
    pass


class EmptyKeypoints(KgadError):
    """A detector found no keypoints (callers typically fall back to FPS)."""


class DegenerateCorrespondences(KgadError):
    """Every sampled RANSAC triplet was collinear or failed the edge check."""


class NoOverlap(KgadError):
    """ICP found zero correspondences within the distance gate."""


class UndefinedMetric(KgadError, ValueError):
    """AUROC requested on single-class labels."""


class ParseError(KgadError, ValueError):
    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class RegistrationFailed(KgadError):
    def __init__(self, message, prototype_id=None):
        self.prototype_id = prototype_id
        super().__init__(message)
