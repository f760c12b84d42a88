"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid rig, fault, scene or pattern description.

    ``field`` names the offending entry (dotted path) when it is known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DegenerateFrustumError(ValueError):
    """The eye is on or behind the projection plane."""


class NoImageError(ValueError):
    """The point has no image on the plane as seen from the eye."""


class UnobservableError(ValueError):
    """A least-squares problem is rank deficient.

    ``direction`` is a unit vector spanning the unobservable subspace.
    """

    def __init__(self, message, direction):
        self.direction = tuple(float(x) for x in direction)
        super().__init__(f"{message} (null direction {self.direction})")


class AmbiguousBreakError(ValueError):
    def __init__(self, candidates):
        self.candidates = list(candidates)
        super().__init__(f"multiple eye-field transitions at rows {self.candidates}")
