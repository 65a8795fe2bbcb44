"""SSN pseudonyms: plain SHA-256 or keyed HMAC-SHA-256."""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

import numpy as np

from ..dataset import IDENTIFIER, SSN_PATTERN, Dataset
from ..errors import BadKeyLength, MalformedSSN

KEY_BYTES = 32


@dataclass(frozen=True)
class Pseudonym:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("a pseudonym digest is 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


def sha256_digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def pseudonymize_ssn(ssn: str, key: bytes | None = None) -> Pseudonym:
    """Unkeyed mode hashes the SSN text; keyed mode uses HMAC with ``key``.

    Only the keyed form resists a dictionary attack: the SSN space is small
    enough to hash exhaustively.
    """
    if not isinstance(ssn, str) or not SSN_PATTERN.match(ssn):
        raise MalformedSSN(f"not an SSN: {ssn!r}")
    data = ssn.encode("utf-8")
    if key is None:
        return Pseudonym(sha256_digest(data))
    if len(key) != KEY_BYTES:
        raise BadKeyLength(f"pseudonym key must be {KEY_BYTES} bytes, got {len(key)}")
    return Pseudonym(hmac.new(key, data, hashlib.sha256).digest())


def pseudonymize_column(ds: Dataset, key: bytes | None = None, column: str = IDENTIFIER) -> Dataset:
    values = [pseudonymize_ssn(s, key).hex for s in ds.column(column).tolist()]
    return ds.with_column(column, np.array(values, dtype=object))
