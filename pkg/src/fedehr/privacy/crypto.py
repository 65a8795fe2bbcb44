"""Per-patient keys and authenticated record encryption.

Records bound for external storage are sealed with ChaCha20-Poly1305 under
a key derived from a master key and the patient id.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from ..errors import AuthenticationFailure, BadKeyLength

KEY_BYTES = 32
NONCE_BYTES = 12


def _check_key(key: bytes, what: str = "key") -> None:
    if len(key) != KEY_BYTES:
        raise BadKeyLength(f"{what} must be {KEY_BYTES} bytes, got {len(key)}")


def derive_patient_key(master: bytes, patient_id: str) -> bytes:
    _check_key(master, "master key")
    return hmac.new(master, b"patient-key:" + patient_id.encode("utf-8"), hashlib.sha256).digest()


def encrypt_record(plaintext: bytes, key: bytes, nonce: bytes, aad: bytes | None = None) -> bytes:
    """Ciphertext with the 16-byte Poly1305 tag appended."""
    _check_key(key)
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def decrypt_record(ciphertext: bytes, key: bytes, nonce: bytes, aad: bytes | None = None) -> bytes:
    _check_key(key)
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise AuthenticationFailure("record failed authentication") from None


class PseudonymityService:
    """Seals patient records before they reach a directory-backed store and
    opens them again on pull.

    Each stored blob is ``nonce || ciphertext``; the patient id is bound as
    associated data so blobs cannot be swapped between patients.
    """

    def __init__(self, master_key: bytes, store_dir: str | os.PathLike):
        _check_key(master_key, "master key")
        self._master = master_key
        self.store = Path(store_dir)
        self.store.mkdir(parents=True, exist_ok=True)

    def _path(self, patient_id: str) -> Path:
        name = hashlib.sha256(patient_id.encode("utf-8")).hexdigest()
        return self.store / f"{name}.bin"

    def push(self, patient_id: str, record: dict) -> None:
        key = derive_patient_key(self._master, patient_id)
        nonce = os.urandom(NONCE_BYTES)
        body = json.dumps(record, sort_keys=True).encode("utf-8")
        blob = nonce + encrypt_record(body, key, nonce, patient_id.encode("utf-8"))
        self._path(patient_id).write_bytes(blob)

    def pull(self, patient_id: str) -> dict:
        blob = self._path(patient_id).read_bytes()
        key = derive_patient_key(self._master, patient_id)
        body = decrypt_record(blob[NONCE_BYTES:], key, blob[:NONCE_BYTES], patient_id.encode("utf-8"))
        return json.loads(body)
