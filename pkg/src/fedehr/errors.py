"""Exception hierarchy shared by every fedehr module."""


class FedEHRError(Exception):
    """Base class for all package errors."""


# dataset

class MissingColumn(FedEHRError):
    pass


class MalformedRow(FedEHRError):
    def __init__(self, row, reason):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class ExhaustedSpace(FedEHRError):
    pass


class LengthMismatch(FedEHRError):
    pass


class DegenerateColumn(FedEHRError):
    pass


class UnknownColumn(FedEHRError):
    pass


class UnknownCategory(FedEHRError):
    pass


class TooManyClients(FedEHRError):
    pass


# models

class SingularMatrix(FedEHRError):
    pass


class ShapeMismatch(FedEHRError):
    pass


class EmptyShard(FedEHRError):
    pass


class ZeroVariance(FedEHRError):
    pass


# fedlearn

class EmptyUpdates(FedEHRError):
    pass


class ArityMismatch(FedEHRError):
    pass


class NonFinite(FedEHRError):
    """Raised when a parameter update produces NaN or infinity."""


# privacy

class NonNumericColumn(FedEHRError):
    pass


class MalformedSSN(FedEHRError):
    pass


class BadKeyLength(FedEHRError):
    pass


class AuthenticationFailure(FedEHRError):
    """AEAD tag check failed: wrong key, wrong nonce, or tampered ciphertext."""


class TooFewRows(FedEHRError):
    pass


# ehr_audit

class Unauthorized(FedEHRError):
    pass


class MalformedEntry(FedEHRError):
    pass
