"""Coordinator, site worker, wire format and transports."""

from .coordinator import Coordinator, FederationConfig, aggregate, coordinator_run, run_inprocess
from .masking import Compensator, compensator_unmask, mask_local_stats
from .site import SiteWorker, site_serve
from .transport import CountingChannel, LoopbackChannel, SocketChannel

__all__ = [
    "Compensator",
    "Coordinator",
    "CountingChannel",
    "FederationConfig",
    "LoopbackChannel",
    "SiteWorker",
    "SocketChannel",
    "aggregate",
    "compensator_unmask",
    "coordinator_run",
    "mask_local_stats",
    "run_inprocess",
    "site_serve",
]
