"""Platform-wide measurement primitives.

One digest algorithm (SHA-256, 32-byte output) is used everywhere: realm
initial measurements, extensible measurement chains, policy digests and
token digests.  Tokens declare the algorithm by name so a verifier can
reject anything it does not understand.
"""

from __future__ import annotations

import hashlib

DIGEST_ALGORITHM = "sha256"
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

_RIM_DOMAIN = b"micasim.rim.v1"


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def extend_chain(current: bytes, value: bytes) -> bytes:
    """Order-sensitive measurement extension: H(current || value)."""
    if len(current) != DIGEST_SIZE or len(value) != DIGEST_SIZE:
        raise ValueError("measurement values must be 32 bytes")
    return digest(current + value)


def initial_measurement(image: bytes, n_granules: int, ipa_base: int) -> bytes:
    """Boot-time identity over the initial image and address-space layout.

    Content-derived only: two realms built from the same image and layout
    share the same value.
    """
    header = (
        _RIM_DOMAIN
        + ipa_base.to_bytes(8, "little")
        + n_granules.to_bytes(8, "little")
        + len(image).to_bytes(8, "little")
    )
    return digest(header + image)
