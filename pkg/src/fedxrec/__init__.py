"""Federated cross-domain recommendation simulator.

Clients (domains) learn user preferences from interactions, review text and
mined potential interests, and exchange only differentially private user
prototypes through a central server.
"""

__version__ = "0.1.0"
