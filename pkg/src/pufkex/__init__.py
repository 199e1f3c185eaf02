"""pufkex: PUF-backed mutual authentication and key exchange.

A three-party handshake (server, client, PUF-bearing device) built from
XOR masking and hashing only, with single-CRP storage and in-protocol
CRP rotation, plus a simulated SRAM-PUF and an adversarial harness that
exercises the protocol's security properties.
"""

from .primitives import DeviceId, Word256, hash256, hash_fields, xor256

__version__ = "0.1.0"

__all__ = ["Word256", "DeviceId", "hash256", "hash_fields", "xor256", "__version__"]
