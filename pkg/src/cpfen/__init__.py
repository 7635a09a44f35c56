"""Desk-scale cyber-physical sensor network simulator and gateway.

Layers, bottom to top:

- topology: deployment description (cells, masters, nodes, rods) and limits
- surface: analytic bench surfaces and measurement synthesis
- frames: fixed-point process data codec
- linksim: cyclic wireless exchange with sub-cycle retransmission
- addrspace: hierarchical address space over the running network
- driver: ties the above into a stepped simulation behind the address space
- reconstruct: grid shape estimation from tilts and rod lengths
- protocol / gateway / client: framed TCP access to the address space
- cli: operator front end
"""

__version__ = "0.1.0"
