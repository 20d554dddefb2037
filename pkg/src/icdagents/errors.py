"""Exception hierarchy shared across the package."""


class IcdAgentsError(Exception):
    """Base class for every error raised by this package."""


class IcdError(IcdAgentsError):
    pass


class CorpusError(IcdAgentsError):
    pass


class GatewayError(IcdAgentsError):
    """A completion could not be obtained."""


class AuthenticationError(GatewayError):
    pass


class RateLimitError(GatewayError):
    pass


class ContentFilterError(GatewayError):
    """The provider refused the prompt or the completion on content grounds."""


class GatewayTimeout(GatewayError):
    pass


class UnscriptedRequestError(GatewayError):
    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no scripted response for request digest {digest}")


class CacheLockedError(GatewayError):
    pass


class BudgetError(GatewayError):
    """The fixed prompt parts alone do not fit the token budget."""


class ParseError(IcdAgentsError):
    """Model output could not be turned into the expected structure."""


class NoAssignmentsFound(ParseError):
    pass


class NoStructuredRegion(ParseError):
    pass


class PromptError(IcdAgentsError):
    pass


class ConfigError(IcdAgentsError):
    pass


class EvaluationError(IcdAgentsError):
    pass
