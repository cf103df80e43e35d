"""Exception hierarchy shared by all vanetsec modules."""


class VanetSecError(Exception):
    """Base class for every error raised by this package."""


class CryptoError(VanetSecError):
    pass


class AuthorityError(VanetSecError):
    pass


class HsmError(VanetSecError):
    pass


class NodeError(VanetSecError):
    pass


class RevocationError(VanetSecError):
    pass


class ScenarioError(VanetSecError):
    """Scenario validation failure; carries one diagnostic per bad field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class InvariantViolation(VanetSecError):
    """A simulation run broke one of its own consistency guarantees."""
