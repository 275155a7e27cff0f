"""Exception types raised across the package.

Every error carries enough location info (file, line, image path, ...) in its
message to act on without a debugger.
"""


class LocmapError(Exception):
    """Base class for all locmap errors."""


# --- dataset format ---

class MalformedCsv(LocmapError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason


class UnknownSensorRef(LocmapError):
    def __init__(self, sensor_id, where=""):
        msg = f"unknown sensor/device id {sensor_id!r}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)
        self.sensor_id = sensor_id


class DanglingObservation(LocmapError):
    def __init__(self, point_id, detail=""):
        msg = f"observation references unknown point {point_id}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.point_id = point_id


class BinaryShapeMismatch(LocmapError):
    def __init__(self, path, detail):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)


class InvariantViolation(LocmapError):
    pass


class IoError(LocmapError):
    def __init__(self, path, detail):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)


class SizeMismatch(LocmapError):
    pass


class NegativeDepth(LocmapError):
    pass


# --- geometry ---

class NonPositiveDepth(LocmapError):
    pass


class DegenerateGeometry(LocmapError):
    pass


# --- pairing / matching / fusion ---

class DimensionMismatch(LocmapError):
    pass


class MissingPose(LocmapError):
    def __init__(self, image):
        super().__init__(f"no pose available for image {image!r}")
        self.image = image


class MissingDepth(LocmapError):
    def __init__(self, image):
        super().__init__(f"no depth record for image {image!r}")
        self.image = image


class WeightShapeMismatch(LocmapError):
    pass


# --- localization ---

class CollinearPoints(LocmapError):
    pass


class NoRealSolution(LocmapError):
    pass


# --- evaluation ---

class MissingGroundTruth(LocmapError):
    def __init__(self, image):
        super().__init__(f"no ground-truth pose for image {image!r}")
        self.image = image


class NoLocalizedQueries(LocmapError):
    pass
