"""Simulator of a hardware-style disaggregated memory system."""

from .errors import ClioError, Status
from .memnode import MemoryNode, MnConfig
from .netsim import FaultPlan, Network
from .page_table import HashPageTable, PageTableEntry, Perm, Tlb

__all__ = ["ClioError", "FaultPlan", "HashPageTable", "MemoryNode", "MnConfig", "Network",
           "PageTableEntry", "Perm", "Status", "Tlb"]

__version__ = "0.1.0"
