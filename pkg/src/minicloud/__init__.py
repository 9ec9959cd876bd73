"""Desk-scale cloud application platform.

Networked worker containers aggregate into one logical execution layer with
fabric services (membership, failure detection, monitoring, provisioning),
foundation services (storage, reservation, accounting/billing, reporting),
and three programming models (Task, Thread, MapReduce), exposed through a
client SDK, a management CLI/HTTP API, and an operator console.
"""

__version__ = "0.1.0"
