"""Exception hierarchy shared by every rel2prompt module.

Each error subclasses the closest builtin so callers that catch ``ValueError`` or
``KeyError`` keep working.
"""


class Rel2PromptError(Exception):
    """Base class for all rel2prompt errors."""


# relational store
class MissingFile(Rel2PromptError, FileNotFoundError):
    pass


class SchemaMismatch(Rel2PromptError, ValueError):
    pass


class DuplicatePrimaryKey(Rel2PromptError, ValueError):
    pass


# graphs and sampling
class UnknownRelation(Rel2PromptError, KeyError):
    pass


class UnknownNode(Rel2PromptError, KeyError):
    pass


# numeric core
class ShapeMismatch(Rel2PromptError, ValueError):
    pass


class NonScalarLoss(Rel2PromptError, ValueError):
    pass


class NonFiniteLoss(Rel2PromptError, FloatingPointError):
    pass


class DomainError(Rel2PromptError, ValueError):
    pass


class LengthMismatch(Rel2PromptError, ValueError):
    pass


class DegenerateLabels(Rel2PromptError, ValueError):
    pass


# encoder, prompt, decoder, pretraining
class UnfittedEncoder(Rel2PromptError, RuntimeError):
    pass


class MissingEmbedding(Rel2PromptError, KeyError):
    pass


class UnknownTask(Rel2PromptError, KeyError):
    pass


class InsufficientExamples(Rel2PromptError, ValueError):
    pass


class ContextOverflow(Rel2PromptError, ValueError):
    pass


class EmptyMaskSet(Rel2PromptError, ValueError):
    pass


# runs
class ConfigError(Rel2PromptError, ValueError):
    pass


class UnknownSplit(Rel2PromptError, KeyError):
    pass


class UnsupportedMode(Rel2PromptError, ValueError):
    pass


class UsageError(Rel2PromptError, ValueError):
    pass
