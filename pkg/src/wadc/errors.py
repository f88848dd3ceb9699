"""Exception types raised across the wadc package."""


class WadcError(Exception):
    """Base class for all wadc errors."""


class ConfigError(WadcError):
    """Configuration file is malformed or violates the schema."""


class SingularNetwork(WadcError):
    """Internal-node elimination hit a singular block."""


class SingularAlgebraicSystem(WadcError):
    """Stator/network algebraic system is singular at the given rotor angles."""


class NoConvergence(WadcError):
    """Newton iteration failed to converge."""

    def __init__(self, max_iters, final_residual, history=None):
        self.max_iters = max_iters
        self.final_residual = final_residual
        self.history = list(history) if history is not None else []
        super().__init__(
            f"no convergence after {max_iters} iterations "
            f"(final scaled residual {final_residual:.3e})"
        )


class JacobianInconsistent(WadcError):
    """Finite-difference Jacobian failed the step-halving consistency check."""


class UnstableLocalLoop(WadcError):
    """Local gains do not render A + B_u K Hurwitz.

    On the shipped benchmark this indicates either a bad operating point or a
    stator sign-convention mismatch; rerun with other equilibrium settings
    before trusting any downstream design.
    """


class IllPosedLyapunov(WadcError):
    """Continuous cost factorization needs an invertible matrix with no
    mirrored eigenvalue pair; close the local loops first."""


class InvalidSampling(WadcError):
    """Sampling period must be strictly positive (and delay nonnegative)."""


class NotStabilizable(WadcError):
    """Riccati iteration diverged or the closed loop is not Schur stable."""


class IndefiniteCost(WadcError):
    """Input-weight pivot of the discrete cost is indefinite."""


class GammaInfeasible(WadcError):
    """A disturbance-attenuation level failed one of the solvability checks."""

    def __init__(self, which_condition, detail=""):
        self.which_condition = which_condition
        msg = f"gamma infeasible: {which_condition}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NoFeasibleGamma(WadcError):
    """Upper-bracket search for the attenuation level failed."""


class UnstableSystem(WadcError):
    """Operation requires a Schur-stable state matrix."""


class NotSymmetric(WadcError):
    """Plant or gains violate the machine-swap symmetry needed for the
    built-in oscillation/common decomposition."""


class NotBlockDiagonalizable(WadcError):
    """Supplied coordinate change fails a block-diagonalization residual."""

    def __init__(self, which_equation, residual):
        self.which_equation = which_equation
        self.residual = residual
        super().__init__(
            f"{which_equation} off-block residual {residual:.3e} exceeds tolerance"
        )


class AsymmetricDelays(WadcError):
    """Link-delay matrix must be symmetric with zero diagonal."""


class ScheduleMismatch(WadcError):
    """Delay schedule disagrees with the modal designs it should drive."""


class EventGridMismatch(WadcError):
    """Integrator step does not hit every sampling/actuation event."""
