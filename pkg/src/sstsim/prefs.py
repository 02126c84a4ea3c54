"""Per-node preference profiles and the social influence rules that move them.

A profile maps category ids to quantifiers in (0, 1] that express how much a
node cares about each category. Four influence rules nudge a node's profile
toward its buddies' tastes, each picking the target category differently
(summed weight, raw popularity, single strongest opinion, or one random
buddy's pick). Completed downloads feed back into the profile as well, and a
small demand predictor ranks catalog items by combined self/buddy interest.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field

from .graphgen import SocialGraph
from .rng import as_rng

# A profile is just the mapping category-id -> quantifier; all operations
# treat profiles as immutable and return fresh dicts on change.
PreferenceProfile = dict[int, float]

QUANTIFIER_FLOOR = 1e-6


class InfluenceModel(enum.Enum):
    """The four built-in influence rules; values are the config-file tokens."""

    TOP_SUM = "mi1"       # top categories by summed buddy quantifiers
    TOP_COUNT = "mi2"     # top categories by buddy occurrence count
    PEAK = "mi3"          # the single highest quantifier anywhere nearby
    RANDOM_BUDDY = "mi4"  # one random buddy, one random category of theirs


@dataclass
class NeighborhoodStats:
    """Aggregate view of one node's buddies: per category, how many buddies
    hold it and the sum of their quantifiers."""

    count: dict[int, int] = field(default_factory=dict)
    quantifier_sum: dict[int, float] = field(default_factory=dict)

    def categories(self) -> list[int]:
        return sorted(self.count)


def init_profiles(
    n: int,
    categories: int,
    seed: int | random.Random,
    k_min: int = 3,
    k_max: int = 10,
) -> list[PreferenceProfile]:
    """Draw a starting profile per node: a uniform number of distinct
    categories between k_min and k_max, each with quantifier uniform in
    (0, 1]."""
    rng = as_rng(seed)
    profiles: list[PreferenceProfile] = []
    for _ in range(n):
        k = rng.randint(min(k_min, categories), min(k_max, categories))
        cats = rng.sample(range(categories), k)
        profiles.append({c: 1.0 - rng.random() for c in sorted(cats)})
    return profiles


def neighborhood_stats(
    graph: SocialGraph, profiles: list[PreferenceProfile], node: int
) -> NeighborhoodStats:
    """Tally each category over the node's buddy-list: occurrence count and
    quantifier sum. A node with no buddies yields empty stats."""
    stats = NeighborhoodStats()
    for buddy in graph.adjacency[node]:
        for category, q in profiles[buddy].items():
            stats.count[category] = stats.count.get(category, 0) + 1
            stats.quantifier_sum[category] = stats.quantifier_sum.get(category, 0.0) + q
    return stats


def _raise_quantifier(q: float, pull: float) -> float:
    """Move q toward 1 by the fraction `pull` of the remaining headroom."""
    return q + pull * (1.0 - q)


def _top_categories(ranking: dict[int, float], limit: int = 3) -> list[int]:
    # deterministic: heavier weight first, then smaller category id
    return sorted(ranking, key=lambda c: (-ranking[c], c))[:limit]


def apply_influence(
    model: InfluenceModel,
    graph: SocialGraph,
    profiles: list[PreferenceProfile],
    node: int,
    seed: int | random.Random,
) -> PreferenceProfile:
    """Apply one unconditional influence update and return the node's new
    profile (the caller decides whether the update happens at all).

    TOP_SUM / TOP_COUNT: rank the neighborhood's categories by quantifier sum
    resp. occurrence count, take the top three, pick one with probability
    proportional to its occurrence count, then raise the node's quantifier by
    the buddies' mean quantifier for it (inserting at that mean when absent).

    PEAK: take the single largest quantifier any buddy holds (ties uniform),
    raise by that value, or insert at half of it.

    RANDOM_BUDDY: pick a uniform buddy and a uniform category of theirs, raise
    by that buddy's quantifier divided by the neighborhood occurrence count,
    or insert at half the buddy's quantifier.

    Isolated nodes (and empty neighborhoods) are a no-op.
    """
    if not graph.adjacency[node]:
        return profiles[node]
    rng = as_rng(seed)
    profile = profiles[node]

    if model in (InfluenceModel.TOP_SUM, InfluenceModel.TOP_COUNT):
        stats = neighborhood_stats(graph, profiles, node)
        if not stats.count:
            return profile
        ranking = stats.quantifier_sum if model is InfluenceModel.TOP_SUM else stats.count
        candidates = _top_categories(dict(ranking))
        weights = [stats.count[c] for c in candidates]
        category = rng.choices(candidates, weights=weights, k=1)[0]
        mean_q = stats.quantifier_sum[category] / stats.count[category]
        updated = dict(profile)
        if category in profile:
            updated[category] = _raise_quantifier(profile[category], mean_q)
        else:
            updated[category] = mean_q
        return updated

    if model is InfluenceModel.PEAK:
        best: list[int] = []
        q_max = 0.0
        for buddy in sorted(graph.adjacency[node]):
            for category, q in profiles[buddy].items():
                if q > q_max:
                    q_max = q
                    best = [category]
                elif q == q_max and category not in best:
                    best.append(category)
        if not best:
            return profile
        category = best[rng.randrange(len(best))]
        updated = dict(profile)
        if category in profile:
            updated[category] = _raise_quantifier(profile[category], q_max)
        else:
            updated[category] = 0.5 * q_max
        return updated

    # RANDOM_BUDDY
    buddies = sorted(graph.adjacency[node])
    buddy = buddies[rng.randrange(len(buddies))]
    buddy_profile = profiles[buddy]
    if not buddy_profile:
        return profile
    categories = sorted(buddy_profile)
    category = categories[rng.randrange(len(categories))]
    buddy_q = buddy_profile[category]
    occurrences = sum(1 for b in graph.adjacency[node] if category in profiles[b])
    updated = dict(profile)
    if category in profile:
        updated[category] = _raise_quantifier(profile[category], buddy_q / occurrences)
    else:
        updated[category] = 0.5 * buddy_q
    return updated


def apply_download_feedback(
    profiles: list[PreferenceProfile],
    node: int,
    category: int,
    negative: bool,
    strength_scale: float = 0.5,
) -> PreferenceProfile:
    """Fold one finished download back into a node's profile.

    The step size is strength_scale divided by the number of profile entries,
    so nodes with broad interests move less per event. Positive feedback
    closes part of the gap to 1; negative feedback shrinks the quantifier by
    the same fraction, floored at a tiny positive value. A category the node
    never cared about is inserted on positive feedback (as if starting from
    zero) and stays absent on negative.
    """
    profile = profiles[node]
    s = strength_scale / max(1, len(profile))
    if category not in profile:
        if negative:
            return profile
        updated = dict(profile)
        updated[category] = max(QUANTIFIER_FLOOR, min(1.0, s))
        return updated
    q = profile[category]
    q2 = q - s * q if negative else _raise_quantifier(q, s)
    updated = dict(profile)
    updated[category] = max(QUANTIFIER_FLOOR, min(1.0, q2))
    return updated


def similarity(a: PreferenceProfile, b: PreferenceProfile) -> float:
    """Cosine similarity of two profiles over their category vectors; 0.0
    when either is empty or the category sets are disjoint."""
    if not a or not b:
        return 0.0
    dot = math.fsum(q * b[c] for c, q in a.items() if c in b)
    if dot == 0.0:
        return 0.0
    norm_a = math.sqrt(math.fsum(q * q for q in a.values()))
    norm_b = math.sqrt(math.fsum(q * q for q in b.values()))
    return dot / (norm_a * norm_b)


def predict_demand(
    graph: SocialGraph,
    profiles: list[PreferenceProfile],
    node: int,
    catalog: dict[int, int],
    exclude: set[int] | frozenset[int] = frozenset(),
    w_self: float = 0.7,
    w_buddy: float = 0.3,
) -> list[int]:
    """Rank catalog items (item id -> category) by predicted appeal to one
    node: a weighted blend of the node's own quantifier and its buddies' mean
    quantifier for the item's category (absent entries count as zero). Items
    in `exclude` (cached or already downloaded) are dropped; ties go to the
    smaller item id."""
    buddies = sorted(graph.adjacency[node])
    own = profiles[node]
    buddy_mean: dict[int, float] = {}
    scored = []
    for item_id in sorted(catalog):
        if item_id in exclude:
            continue
        category = catalog[item_id]
        if buddies and category not in buddy_mean:
            buddy_mean[category] = (
                math.fsum(profiles[b].get(category, 0.0) for b in buddies) / len(buddies)
            )
        score = w_self * own.get(category, 0.0) + w_buddy * buddy_mean.get(category, 0.0)
        scored.append((-score, item_id))
    scored.sort()
    return [item_id for _, item_id in scored]


def export_profiles(profiles: list[PreferenceProfile], destination) -> None:
    """Write all profiles as `node,category,quantifier` lines (6 decimal
    places), sorted for reproducible output."""
    own = isinstance(destination, (str, bytes)) or hasattr(destination, "__fspath__")
    fh = open(destination, "w", newline="\n") if own else destination
    try:
        fh.write("node,category,quantifier\n")
        for node, profile in enumerate(profiles):
            for category in sorted(profile):
                fh.write(f"{node},{category},{profile[category]:.6f}\n")
    finally:
        if own:
            fh.close()
