"""Exception hierarchy. Everything the CLI reports as a domain error derives
from :class:`Fp4StreamError`."""


class Fp4StreamError(Exception):
    pass


class CodecError(Fp4StreamError, ValueError):
    pass


class NonFiniteError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class TensorFormatError(Fp4StreamError, ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class BadVersionError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ShapeError(Fp4StreamError, ValueError):
    pass


class LayoutError(Fp4StreamError, ValueError):
    pass


class HaloError(LayoutError):
    pass


class ForeignPositionError(Fp4StreamError, KeyError):
    pass


class MissingChunkError(Fp4StreamError, KeyError):
    pass


class SinkError(Fp4StreamError, ValueError):
    pass


class CalibrationError(Fp4StreamError, ValueError):
    pass
