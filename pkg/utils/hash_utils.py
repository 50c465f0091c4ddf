"""
Checksum utilities for persisted run artifacts.

SHA256 digests over in-memory payloads, used to seal the coverage
database file.
"""

import hashlib
from typing import Union


def sha256_bytes(payload: Union[bytes, str]) -> str:
    """Hex-encoded SHA256 of ``payload`` (str is encoded as UTF-8)."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def verify_sha256(payload: Union[bytes, str], expected_hash: str, source: str = "<memory>") -> None:
    """
    Check ``payload`` against an expected SHA256 (hex, case-insensitive).

    Raises:
        HashVerificationError: if the digests differ
    """
    actual = sha256_bytes(payload)
    if actual.lower() != expected_hash.strip().lower():
        raise HashVerificationError(source, expected_hash, actual)


class HashVerificationError(Exception):
    """Raised when hash verification fails"""

    def __init__(self, source: str, expected: str, actual: str):
        self.source = source
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Checksum mismatch for {source}. "
            f"Expected: {expected}, Got: {actual}"
        )
