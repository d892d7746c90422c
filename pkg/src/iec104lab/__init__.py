"""Desk-scale IEC 60870-5-104 workbench.

Simulated telecontrol endpoints over a deterministic virtual network, an
inline interception agent with stateful sequence correction, a coordinator
channel driving it, and trace analyzers for the resulting signatures.
"""

__version__ = "0.1.0"
