"""micasim: a deterministic confidential-computing platform simulator.

Granule-level memory ownership, realm lifecycle, tenant policies over
every inter-realm and realm-to-host channel, and group attestation over
connected pipelines of realms.
"""

from .attestation import HmacSigner, VerifiedGroup, verify_group_token
from .granules import FAULT, GRANULE_SIZE, HOST, GranuleSpace, GranuleTag
from .monitor import ExitEvent, FilterVerdict, Monitor
from .policy import (
    ChannelType,
    FilterAction,
    PolicyConfig,
    TransType,
    decode_policy,
    encode_policy,
    parse_policy,
    policy_digest,
)
from .realm import PRIVATE_IPA_BASE, RealmState

__version__ = "0.1.0"

__all__ = [
    "FAULT",
    "GRANULE_SIZE",
    "HOST",
    "PRIVATE_IPA_BASE",
    "ChannelType",
    "ExitEvent",
    "FilterAction",
    "FilterVerdict",
    "GranuleSpace",
    "GranuleTag",
    "HmacSigner",
    "Monitor",
    "PolicyConfig",
    "RealmState",
    "TransType",
    "VerifiedGroup",
    "decode_policy",
    "encode_policy",
    "parse_policy",
    "policy_digest",
    "verify_group_token",
]
