"""Depot-based exposed-buffer storage mesh.

Buffers live on depots as leased, size-bounded allocations named only by
unforgeable capabilities. Layers above compose them: exNode documents stripe
and replicate allocations into logical files, the runtime moves file bytes in
parallel with failover, a policy daemon keeps leases and replica counts
healthy, and a transform engine runs budgeted operations next to the data.
"""

from .capability import Capability, CapabilitySet, Hardness, Kind, parse_capability
from .client import DepotClient
from .depot import Depot, DepotConfig, DepotStats
from .errors import EbpError
from .exnode import ExNode, read_exnode, write_exnode
from .lors import download, repair, upload

__all__ = [
    "Capability",
    "CapabilitySet",
    "Depot",
    "DepotClient",
    "DepotConfig",
    "DepotStats",
    "EbpError",
    "ExNode",
    "Hardness",
    "Kind",
    "download",
    "parse_capability",
    "read_exnode",
    "repair",
    "upload",
    "write_exnode",
]

__version__ = "0.1.0"
