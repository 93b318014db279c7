"""Desk-scale vertically integrated grid middleware.

The pieces, bottom up: a mock batch daemon (tsi), per-Vsite job
supervisors that verify, incarnate and drive signed abstract jobs
(njs), authenticated gateways that route framed requests between
organizations (gateway, upl), a PKI for single sign-on (pki), a
resource broker and co-allocating meta-scheduler (broker, reservations),
a command-line client with a local HTTP bridge (client, cli, bridge),
and a multi-site test federation harness (harness).
"""

__version__ = "0.1.0"
