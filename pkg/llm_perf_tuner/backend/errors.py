"""
Error hierarchy for the performance tuner
Every error exposes `code`, the class name printed by the CLI
"""


class TunerError(Exception):
    """Base class for all domain errors"""

    def __init__(self, message='', **details):
        super().__init__(message)
        self.message = message
        self.details = details

    @property
    def code(self):
        return type(self).__name__

    def to_dict(self):
        """Machine-readable form used in reports and exclusion lists"""
        return {'error': self.code, 'message': self.message, **self.details}

    def __str__(self):
        return f"{self.code}: {self.message}" if self.message else self.code


# model-config
class SpecError(TunerError):
    """Invalid model, parallelism or platform specification"""


class InvalidSpec(SpecError):
    pass


class NonDivisibleBatch(SpecError):
    pass


class NonDivisibleLayers(SpecError):
    pass


class GpuCountMismatch(SpecError):
    pass


# traffic-model
class TrafficError(TunerError):
    """Rank placement or traffic construction failure"""


class UnmappableTpGroup(TrafficError):
    pass


class UnmappableDpGroup(TrafficError):
    pass


class NonSquare(TrafficError):
    pass


class EmptyHeatmap(TrafficError):
    pass


# profiles
class ProfileError(TunerError):
    """Bandwidth or utilization profile failure"""


class MalformedRow(ProfileError):
    pass


class NonPositiveBandwidth(ProfileError):
    pass


class MissingProfileKey(ProfileError):
    pass


class EmptyProfile(ProfileError):
    pass


# cost-model
class CostModelError(TunerError):
    """Cost formula failure"""


class NotMoeModel(CostModelError):
    pass


class AssemblyMismatch(CostModelError):
    pass


# schedule-sim
class SimulationError(TunerError):
    """Pipeline simulation failure"""


class InvalidSimInput(SimulationError):
    pass


class ScheduleDeadlock(SimulationError):
    pass


# tuner
class TuneError(TunerError):
    """Configuration search failure"""


class NoFeasibleCandidate(TuneError):
    pass


class InvalidTuneRequest(TuneError):
    pass
