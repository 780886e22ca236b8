"""Non-pinned RDMA verbs layer."""

from .checks import probe_points, scan_check, signature_bytes, signature_check
from .ordering import Access, Decision, InFlightTable, PendingOverflow, admit
from .verbs import (
    AlreadyConnected, AtomicKind, Completion, DuplicateRegistration, MrTriple, NotConnected,
    NpConfig, NpCq, NpError, NpOpcode, NpQp, NpRdma, NpWorkRequest, make_np_pair, pin_leaks,
)
from .wire import ControlMessage, Flag, MsgKind, WireError, WireOp, pack_keymap, unpack_keymap

__all__ = [
    "Access", "AlreadyConnected", "AtomicKind", "Completion", "ControlMessage", "Decision",
    "DuplicateRegistration", "Flag", "InFlightTable", "MrTriple", "MsgKind", "NotConnected",
    "NpConfig", "NpCq", "NpError", "NpOpcode", "NpQp", "NpRdma", "NpWorkRequest",
    "PendingOverflow", "WireError", "WireOp", "admit", "make_np_pair", "pack_keymap", "pin_leaks",
    "probe_points", "scan_check", "signature_bytes", "signature_check", "unpack_keymap",
]
