"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can emit a
structured error object without string matching.
"""


class SsdidError(ValueError):
    code = "ssdid.error"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"error": self.code, "message": str(self)}
        if self.details:
            out["details"] = self.details
        return out


# panel ingestion
class EmptyPanel(SsdidError):
    code = "panel.empty"


class DuplicateCell(SsdidError):
    code = "panel.duplicate_cell"


class UnbalancedPanel(SsdidError):
    code = "panel.unbalanced"


class InconsistentAdoption(SsdidError):
    code = "panel.inconsistent_adoption"


class GroupAdoptionMismatch(SsdidError):
    code = "panel.group_adoption_mismatch"


class ShiftOutOfRange(SsdidError):
    code = "panel.shift_out_of_range"


# solvers
class NonFiniteInput(SsdidError):
    code = "solver.non_finite"


class SingularSystem(SsdidError):
    code = "solver.singular"


class InfeasibleConstraints(SsdidError):
    code = "solver.infeasible"


# estimation
class InvalidConfig(SsdidError):
    code = "config.invalid"


class HorizonOverflow(InvalidConfig):
    code = "config.horizon_overflow"


class NoControls(SsdidError):
    code = "estimate.no_controls"


class WeightSumViolation(SsdidError):
    code = "estimate.weight_sum"


class NoUntreatedCells(SsdidError):
    code = "estimate.no_untreated_cells"


# inference
class DegenerateCohort(SsdidError):
    code = "bootstrap.degenerate_cohort"


class ZeroSe(SsdidError):
    code = "inference.zero_se"


# simulation
class InfeasibleSpec(SsdidError):
    code = "dgp.infeasible_spec"
