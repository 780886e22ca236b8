"""Discrete-event simulation of non-pinned RDMA over commodity NIC semantics."""

from .host import Host, make_pair
from .sim import MS, NS, US, Engine, LatencyModel, load_latency_model

__all__ = ["Engine", "Host", "LatencyModel", "MS", "NS", "US", "load_latency_model", "make_pair"]
__version__ = "0.1.0"
