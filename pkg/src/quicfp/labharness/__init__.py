"""Scripted loopback endpoints standing in for real QUIC server libraries."""

from .endpoint import ServerSession, draw_tp_order
from .farm import Farm, LocalLab, LocalTransport, load_manifest, max_in_window, serve
from .golden import generate_golden, load_flight_dir, mutate_tp_values, record_flight, replay_flight
from .scripts import (
    LAB_SNI,
    SCRIPTS,
    CloseNoReason,
    CloseWithReason,
    ContinueWithoutAlpnExt,
    FixedOrder,
    FlightScript,
    RandomizedSet,
    Silent,
    SniPolicy,
    check_db_fidelity,
    script,
)

__all__ = [
    "LAB_SNI", "SCRIPTS", "CloseNoReason", "CloseWithReason", "ContinueWithoutAlpnExt", "Farm",
    "FixedOrder", "FlightScript", "LocalLab", "LocalTransport", "RandomizedSet", "ServerSession",
    "Silent", "SniPolicy", "check_db_fidelity", "draw_tp_order", "generate_golden", "load_flight_dir",
    "load_manifest", "max_in_window", "mutate_tp_values", "record_flight", "replay_flight", "script",
    "serve",
]
