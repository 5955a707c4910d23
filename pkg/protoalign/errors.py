"""
Exceptions raised by protoalign.
"""


class ProtoAlignError(Exception):
    """Base class for every error raised by the package"""


class SingularTransform(ProtoAlignError):
    """Affine linear part is not invertible (|det| <= 1e-8)"""


class InvalidConfig(ProtoAlignError):
    """Configuration value out of range or unknown key"""


class GenerationError(ProtoAlignError):
    """Phantom generation produced a subject that breaks dataset invariants"""


class FormatError(ProtoAlignError):
    """Subject or checkpoint file is corrupt or inconsistent with its header"""


class DatasetIOError(ProtoAlignError, OSError):
    """File could not be read or written"""


class UnknownInstitution(ProtoAlignError):
    """Institution id not present in the manifest"""


class BadFold(ProtoAlignError):
    """Fold index outside 1..4"""


class InsufficientSubjects(ProtoAlignError):
    """Not enough subjects to build an episode"""


class ShapeError(ProtoAlignError):
    """Input shape not supported by the network"""


class ShapeMismatch(ProtoAlignError):
    """Two arrays that must share a shape do not"""


class EmptyMask(ProtoAlignError):
    """Pooling mask sums to (almost) zero"""


class NoValidPrototype(ProtoAlignError):
    """Every window of a prototype kind was empty"""


class HeadDisabled(ProtoAlignError):
    """Operation needs a head that the model config does not enable"""


class DivergenceError(ProtoAlignError):
    """Training loss became non-finite"""


class ConfigMismatch(ProtoAlignError):
    """Checkpoint was written for a different model config"""


class EmptyResults(ProtoAlignError):
    """Nothing to summarize or report"""


class KeyMismatch(ProtoAlignError):
    """Paired results are not keyed by the same episodes"""
