"""Exception hierarchy shared by all modules.

Three families map onto CLI exit codes: configuration/usage problems (2),
numerical failures (3), and data/transport failures (4).
"""


class DopinfError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class UsageError(DopinfError):
    """Bad configuration or invalid arguments."""

    exit_code = 2


class NumericalError(DopinfError):
    """A computation failed or a numerical precondition was violated."""

    exit_code = 3


class DataError(DopinfError):
    """Dataset files are missing, corrupt, or unwritable."""

    exit_code = 4


class InvalidPartitionError(UsageError):
    """Requested partition cannot cover the dataset rows."""


class DatasetFormatError(DataError):
    """Shard or manifest contents do not match the container contract."""


class SingularLiftError(NumericalError):
    """Reciprocal lifting hit a zero entry."""

    def __init__(self, variable: int, time_index: int):
        self.variable = variable
        self.time_index = time_index
        super().__init__(
            f"reciprocal lift of variable {variable} hit a zero at "
            f"time index {time_index}"
        )


class DegenerateVariableError(NumericalError):
    """A variable has zero max-abs after centering and cannot be scaled."""

    def __init__(self, variable: int):
        self.variable = variable
        super().__init__(
            f"variable {variable} is constant over the training horizon "
            "(global max-abs of centered data is 0)"
        )


class CollectiveContractError(DopinfError):
    """Ranks disagreed on the collective call sequence or payload shape."""

    exit_code = 3


class TransportError(DopinfError):
    """A peer was lost or a collective timed out."""

    exit_code = 4


class UnderdeterminedError(NumericalError):
    """Regression has more unknown columns than data rows."""

    def __init__(self, r: int, n_rows: int, r_max: int):
        self.r = r
        self.n_rows = n_rows
        self.r_max = r_max
        super().__init__(
            f"r={r} needs {r + r * (r + 1) // 2 + 1} columns but only "
            f"{n_rows} data rows are available; maximum admissible r is {r_max}"
        )


class SingularSystemError(NumericalError):
    """Regularized normal matrix is not positive definite."""


class NoFeasiblePairError(NumericalError):
    """Every regularization candidate violated the growth constraint."""

    def __init__(self, best_error: float, best_pair: tuple):
        self.best_error = best_error
        self.best_pair = best_pair
        super().__init__(
            "no regularization pair satisfied the growth constraint; "
            f"best infeasible training error {best_error:.6e} at "
            f"beta1={best_pair[0]:.6e} beta2={best_pair[1]:.6e}"
        )


class CflError(NumericalError):
    """Requested time step violates the stability bound."""

    def __init__(self, dt: float, dt_max: float):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(
            f"dt={dt:.6e} violates the stability bound; largest admissible "
            f"dt is {dt_max:.6e}"
        )


class RankDeficiencyWarning(UserWarning):
    """Requested reduced dimension exceeds the numerical rank."""
