"""Simulator of a social P2P content distribution protocol over a hybrid
unicast + satellite broadcast network.

Subpackages cover graph generation (`graphgen`), preference and mutual
influence models (`prefs`), the peer/credit/broadcast protocol rules
(`protocol`), the discrete-time engine (`simcore`), log analytics
(`metrics`) and the experiment runner (`cli`).
"""

__version__ = "0.1.0"
