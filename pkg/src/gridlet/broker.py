"""Resource broker: match abstract requests against site offers.

A request matches an offer when processors, runtime, memory, and every
required software entry fit. The cost estimate is linear:
``processors x runtime_limit x cost_rate``. Results come back ranked by
ascending cost, vsite name breaking ties, so matching is a deterministic
pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ajo import ResourceRequest
from .idb import ResourceOffer


@dataclass(frozen=True)
class Match:
    vsite_name: str
    cost: float

    def to_dict(self) -> dict:
        return {"vsite_name": self.vsite_name, "cost": self.cost}


def estimate_cost(request: ResourceRequest, offer: ResourceOffer) -> float:
    return request.processors * request.runtime_limit * offer.cost_rate


def match(request: ResourceRequest, offers: list[ResourceOffer]) -> list[Match]:
    """Exactly the satisfying offers, cheapest first."""
    hits = [
        Match(vsite_name=o.vsite_name, cost=estimate_cost(request, o))
        for o in offers
        if o.satisfies(request)
    ]
    hits.sort(key=lambda m: (m.cost, m.vsite_name))
    return hits
