"""CRL dissemination, Bloom-compressed CRLs and the HSM kill protocol."""

from .bloom import BloomCrl, bloom_build, bloom_parameters, bloom_query, bloom_query_many, sign_bloom
from .pieces import (
    CrlPiece,
    CrlReassembler,
    Pending,
    RsuBroadcaster,
    encode_crl_pieces,
    reassemble,
    rsu_broadcast_schedule,
    v2v_crl_relay,
)
from .rhsm import KillSession, KillState, RdsChannel, rhsm_run

__all__ = [
    "BloomCrl", "bloom_build", "bloom_parameters", "bloom_query", "bloom_query_many", "sign_bloom",
    "CrlPiece", "CrlReassembler", "Pending", "RsuBroadcaster", "encode_crl_pieces", "reassemble",
    "rsu_broadcast_schedule", "v2v_crl_relay", "KillSession", "KillState", "RdsChannel", "rhsm_run",
]
