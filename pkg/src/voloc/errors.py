"""Exception types shared across the package."""


class VolocError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VolocError):
    """A config value violates its documented constraints."""


class ParseError(VolocError):
    """A dataset file line could not be parsed."""


class ValidationError(VolocError):
    """A dataset-level invariant does not hold."""


class ContractViolation(VolocError):
    """The caller broke an operation's precondition."""


class NumericError(VolocError):
    """Non-finite values where finite numbers are required."""


class DegenerateEmbedding(VolocError):
    """Pre-normalization embedding collapsed to (near) zero norm."""


class NoPositives(VolocError):
    """Mining found no geometrically valid positive for an anchor."""

    def __init__(self, anchor_id: int):
        super().__init__(f"no positive candidates for anchor {anchor_id}")
        self.anchor_id = anchor_id


class MiningStarved(VolocError):
    """Negative mining ran out of candidates before meeting its quotas.

    Carries the partial selection so callers can inspect or log it.
    """

    def __init__(self, anchor_id: int, partial_ids, partial_is_hard):
        super().__init__(
            f"negative mining starved for anchor {anchor_id}: "
            f"got {len(partial_ids)} before exhaustion"
        )
        self.anchor_id = anchor_id
        self.partial_ids = tuple(partial_ids)
        self.partial_is_hard = tuple(partial_is_hard)


class TrainingStalled(VolocError):
    """Every anchor of an epoch was skipped; training cannot proceed."""
