"""Exception hierarchy shared by every engine layer.

Each error names the contract it breaks; callers are expected to catch the
specific subclass, not SagaError.
"""


class SagaError(Exception):
    """Base class for all engine errors."""


# -- state model ------------------------------------------------------------

class UnresolvableAtom(SagaError):
    """A condition atom references an entity, field, or operation that the
    snapshot cannot resolve."""

    def __init__(self, key: str):
        super().__init__(f"unresolvable atom reference: {key!r}")
        self.key = key


class UnknownOperation(SagaError):
    """Operation label not present in the workflow or dependency graph."""


class CycleDetected(SagaError):
    """Dependency graph contains a cycle; carries one witness cycle."""

    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = cycle


class StatusTransitionError(SagaError):
    """A status update left the allowed transition automaton."""


# -- context store ----------------------------------------------------------

class StorageFailure(SagaError):
    """Durable append or flush failed; the entry must not be treated as
    committed."""


class UnknownCheckpoint(SagaError):
    """Checkpoint id not present in the log."""


class BudgetTooSmall(SagaError):
    """Mandatory retained entries alone exceed the retention budget."""


class CorruptLog(SagaError):
    """Log cannot be reconciled into a usable prefix."""


# -- validation -------------------------------------------------------------

class SchemaUnknown(SagaError):
    """Declared schema name is not registered."""


class RetryExhausted(SagaError):
    """Augment-and-revalidate exceeded the configured retry bound."""


# -- coordinator ------------------------------------------------------------

class BindingMissing(SagaError):
    """Saga references an operation with no registered executor/compensator."""


class ValidatorUnavailable(SagaError):
    """No validation rules or validator handle available before saga start."""


class CompensationFailed(SagaError):
    """A compensating action failed; run halts for manual intervention."""

    def __init__(self, op: str, reason: str = ""):
        super().__init__(f"compensation failed for {op}: {reason}")
        self.op = op


class RewriteOfPast(SagaError):
    """A replanned action contradicts an already-executed action."""


class CrashInjected(SagaError):
    """Raised by test harnesses to simulate abrupt process death."""


# -- agents -----------------------------------------------------------------

class AgentInputError(SagaError):
    """Inputs do not conform to the agent's declared input schema."""


class ProviderUnavailable(SagaError):
    """Scripted provider outage for this request."""


class NoInventory(SagaError):
    """Catalog has no row satisfying the request."""


class NothingToCompensate(SagaError):
    """Compensation requested for an internal state that was never booked."""


# -- workflow builder -------------------------------------------------------

class RoleExtractionEmpty(SagaError):
    """Problem description yielded no roles."""


class SchemaGapDetected(SagaError):
    """An agent reads or writes fields absent from its log schema."""

    def __init__(self, node: str, missing: list[str]):
        super().__init__(f"log schema gap at {node}: missing {sorted(missing)}")
        self.node = node
        self.missing = sorted(missing)


class RefinementDiverged(SagaError):
    """Workflow refinement failed to converge; carries the blocking checks."""

    def __init__(self, failures: list[str]):
        super().__init__("refinement diverged: " + "; ".join(failures))
        self.failures = failures


# -- planning domain --------------------------------------------------------

class UnknownLocation(SagaError):
    """Plan or query references a location missing from the world model."""


class UnknownPerson(SagaError):
    """Plan references an actor missing from the world model."""


class NegativeInput(SagaError):
    """Segment arithmetic received a negative duration or multiplier."""


class Infeasible(SagaError):
    """No reschedule satisfies the hard constraints; carries the blockers."""

    def __init__(self, blocking: list[str]):
        super().__init__("infeasible: blocked by " + ", ".join(blocking))
        self.blocking = blocking


# -- harness ----------------------------------------------------------------

class ScenarioParseError(SagaError):
    """Scenario bundle file is missing, malformed, or inconsistent."""


class FixtureMismatch(SagaError):
    """Replayed fixture violations differ from the expected list."""

    def __init__(self, name: str, missing: list[str], unexpected: list[str]):
        super().__init__(
            f"fixture {name}: missing={sorted(missing)} unexpected={sorted(unexpected)}"
        )
        self.fixture = name
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
