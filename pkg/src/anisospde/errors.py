"""Exception types raised across the package."""


class AnisoSpdeError(Exception):
    """Base class for all package errors."""


class NotUnitDeterminant(AnisoSpdeError, ValueError):
    pass


class NotPositiveDefinite(AnisoSpdeError, ValueError):
    pass


class GridTooCoarse(AnisoSpdeError, ValueError):
    pass


class MeshTooLarge(AnisoSpdeError, ValueError):
    pass


class DegenerateTriangle(AnisoSpdeError, ValueError):
    pass


class SingularMass(AnisoSpdeError, ValueError):
    pass


class PointOutsideMesh(AnisoSpdeError, ValueError):
    def __init__(self, index, point):
        super().__init__(f"location {index} at {tuple(point)} is outside the mesh")
        self.index = index
        self.point = point


class CholeskyFailure(AnisoSpdeError, ArithmeticError):
    pass


class OutOfRange(AnisoSpdeError, ValueError):
    pass


class DegenerateTargets(AnisoSpdeError, ValueError):
    pass


class HessianIndefinite(AnisoSpdeError, ArithmeticError):
    pass


class AllWeightsDegenerate(AnisoSpdeError, ArithmeticError):
    pass


class NumericallySingularDowndate(AnisoSpdeError, ArithmeticError):
    pass


class MaxIterations(AnisoSpdeError, RuntimeError):
    pass
