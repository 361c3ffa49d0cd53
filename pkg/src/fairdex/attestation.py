"""Simulated remote attestation with a software hardware-root key.

Report wire form: measurement(32) | enclave_pubkey(32) | nonce(32) | root_signature(64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .crypto import KeyPair, sha256, verify

REPORT_SIZE = 32 + 32 + 32 + 64


@dataclass(frozen=True)
class EnclaveIdentity:
    """The code and configuration a simulated CPU measures at enclave launch."""

    program_version: str
    checkpoint_hash: bytes
    network_config_hash: bytes
    confirm_depth: int
    fifo_capacity: int


def measure(identity: EnclaveIdentity) -> bytes:
    version = identity.program_version.encode()
    return sha256(
        struct.pack(">H", len(version))
        + version
        + identity.checkpoint_hash
        + identity.network_config_hash
        + struct.pack(">II", identity.confirm_depth, identity.fifo_capacity)
    )


@dataclass(frozen=True)
class AttestationReport:
    measurement: bytes
    enclave_pubkey: bytes
    nonce: bytes
    root_signature: bytes

    def signed_bytes(self) -> bytes:
        return self.measurement + self.enclave_pubkey + self.nonce

    def encode(self) -> bytes:
        return self.signed_bytes() + self.root_signature

    @classmethod
    def decode(cls, raw: bytes) -> "AttestationReport":
        if len(raw) != REPORT_SIZE:
            raise ValueError("attestation report must be 160 bytes")
        return cls(raw[:32], raw[32:64], raw[64:96], raw[96:])


class SimulatedCPU:
    """Holds the root signing key that stands in for the processor's quoting key.

    Only this object can produce report signatures; the enclave supplies its
    identity and the CPU computes the measurement itself.
    """

    def __init__(self, root: KeyPair | None = None):
        self._root = root or KeyPair()

    @property
    def root_public_key(self) -> bytes:
        return self._root.public_key

    def generate_report(self, identity: EnclaveIdentity, enclave_pubkey: bytes, challenge_nonce: bytes) -> AttestationReport:
        if len(challenge_nonce) != 32:
            raise ValueError("challenge nonce must be 32 bytes")
        m = measure(identity)
        body = m + enclave_pubkey + challenge_nonce
        return AttestationReport(m, enclave_pubkey, challenge_nonce, self._root.sign(body))


def generate_report(cpu: SimulatedCPU, identity: EnclaveIdentity, enclave_pubkey: bytes, challenge_nonce: bytes):
    return cpu.generate_report(identity, enclave_pubkey, challenge_nonce)


def verify_report(
    report: AttestationReport, expected_measurement: bytes, root_pubkey: bytes, challenge_nonce: bytes
) -> bool:
    if report.nonce != challenge_nonce or report.measurement != expected_measurement:
        return False
    try:
        return verify(root_pubkey, report.signed_bytes(), report.root_signature)
    except ValueError:
        return False
