"""Peer, credit, cache, and broadcast state machines of the protocol.

This module holds the *rules*: who serves whom (free buddy service, piece
reciprocity, credit payment, refusal), how credits move and where new ones are
minted, how caches admit and evict items, when the satellite transponder
schedules a broadcast, and how idle peers pick something to prefetch. The
simulation engine wires these rules together per step; everything here is
engine-agnostic and unit-testable in isolation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .graphgen import SocialGraph
from .prefs import PreferenceProfile, predict_demand

DEFAULT_ITEM_BYTES = 100 * 2**20
DEFAULT_PIECE_BYTES = 2**20
DEFAULT_CREDIT_LIMIT = 50
DEFAULT_CACHE_CAPACITY = 20
DEFAULT_TRANSPONDER_BPS = 36_000_000
DEFAULT_DEMAND_THRESHOLD = 5
DEFAULT_BROADCAST_COOLDOWN_S = 6 * 3600
DEFAULT_MAX_HELPERS = 4


@dataclass(frozen=True)
class ContentItem:
    """One downloadable file in the catalog."""

    item_id: int
    category: int
    size_bytes: int = DEFAULT_ITEM_BYTES
    piece_size_bytes: int = DEFAULT_PIECE_BYTES

    @property
    def piece_count(self) -> int:
        return -(-self.size_bytes // self.piece_size_bytes)

    @property
    def full_mask(self) -> int:
        return (1 << self.piece_count) - 1

    def __post_init__(self):
        if self.size_bytes <= 0 or self.piece_size_bytes <= 0:
            raise ValueError("item and piece sizes must be positive")


class TransferKind(enum.IntEnum):
    """Why bytes moved; the transfer log stores these."""

    RECIPROCAL = 0  # plain swarm exchange (tit-for-tat or seeder serve)
    CREDIT = 1      # paid per piece
    BUDDY = 2       # free service between friends
    BROADCAST = 3   # satellite delivery
    PREFETCH = 4    # speculative download while idle

    @property
    def wire_name(self) -> str:
        return self.name.lower()


class ExchangeDecision(enum.Enum):
    FREE_BUDDY = "free_buddy"
    RECIPROCAL = "reciprocal"
    PAY_CREDIT = "pay_credit"
    REFUSE = "refuse"


# ---------------------------------------------------------------------------
# credits
# ---------------------------------------------------------------------------


class CreditLedger:
    """Per-peer credit balances with a debt floor.

    Transfers are zero-sum; seeding rewards are minted, so the conservation
    law is sum(balances) == minted at all times. A disabled ledger (the
    everything-off scenario) rejects all operations.
    """

    def __init__(self, credit_limit: int = DEFAULT_CREDIT_LIMIT, enabled: bool = True):
        if credit_limit < 0:
            raise ValueError("credit limit must be non-negative")
        self.credit_limit = credit_limit
        self.enabled = enabled
        self.balances: dict[int, int] = {}
        self.minted = 0

    def balance(self, peer_id: int) -> int:
        return self.balances.get(peer_id, 0)

    def can_spend(self, peer_id: int, amount: int) -> bool:
        return self.enabled and self.balance(peer_id) - amount >= -self.credit_limit

    def transfer(self, from_peer: int, to_peer: int, amount: int) -> bool:
        """Move credits between peers; False (and no change) if the payer
        would breach the floor."""
        if amount <= 0:
            raise ValueError("transfer amount must be positive")
        if not self.can_spend(from_peer, amount):
            return False
        self.balances[from_peer] = self.balance(from_peer) - amount
        self.balances[to_peer] = self.balance(to_peer) + amount
        return True

    def mint(self, peer_id: int, amount: int) -> None:
        """Create new credits as a seeding reward."""
        if amount < 0:
            raise ValueError("mint amount must be non-negative")
        if not self.enabled or amount == 0:
            return
        self.balances[peer_id] = self.balance(peer_id) + amount
        self.minted += amount

    def check_conservation(self) -> None:
        total = sum(self.balances.values())
        if total != self.minted:
            raise AssertionError(
                f"credit conservation broken: balances sum {total}, minted {self.minted}"
            )
        low = [p for p, b in self.balances.items() if b < -self.credit_limit]
        if low:
            raise AssertionError(f"peers below credit floor: {sorted(low)[:5]}")


def donate_credits(from_peer: int, to_peer: int, amount: int, ledger: CreditLedger) -> bool:
    """Voluntary zero-sum gift; rejected when it would push the donor below
    the floor."""
    if amount <= 0:
        raise ValueError("donation must be positive")
    return ledger.transfer(from_peer, to_peer, amount)


def seeding_reward(ledger: CreditLedger, peer_id: int, pieces_served: int) -> None:
    """Mint one credit per piece a seeder served to a non-buddy."""
    ledger.mint(peer_id, pieces_served)


# ---------------------------------------------------------------------------
# peers
# ---------------------------------------------------------------------------


@dataclass
class PeerState:
    """Everything the protocol knows about one peer.

    `library` holds items the peer completed and keeps for good (its own
    downloads; for the initial seeders, the whole catalog). `cache` holds
    speculative content — prefetched or captured from broadcasts — as
    piece-bitmaps, and is the only store subject to eviction. Piece bitmaps
    fill low-bit-first; the fluid transfer model only ever tracks how many
    pieces a peer holds, not which.
    """

    peer_id: int
    sat_enabled: bool
    buddies: frozenset[int] = frozenset()
    is_seeder: bool = False
    library: set[int] = field(default_factory=set)
    cache: dict[int, int] = field(default_factory=dict)
    active_downloads: set[int] = field(default_factory=set)
    helpers: dict[int, set[int]] = field(default_factory=dict)
    idle_until: float = 0.0

    def holds_full(self, item_id: int, full_mask: int) -> bool:
        return item_id in self.library or self.cache.get(item_id, 0) == full_mask

    def piece_count(self, item_id: int, piece_total: int) -> int:
        if item_id in self.library:
            return piece_total
        return self.cache.get(item_id, 0).bit_count()

    def completed_count(self) -> int:
        """Items this peer finished downloading itself (seeders' preloaded
        catalog does not count)."""
        return len(self.library) if not self.is_seeder else 0


def select_exchange(
    downloader: PeerState,
    candidate: PeerState,
    ledger: CreditLedger,
    item: ContentItem,
    buddy_help: bool = True,
) -> ExchangeDecision:
    """Decide on what terms `candidate` (an active leecher) serves a piece of
    `item` to `downloader`.

    Order of precedence: free service between buddies (when the buddy-help
    feature is on), piece-for-piece reciprocity (the downloader holds
    something the candidate still needs), piece-for-credit, refusal. Initial
    seeders never go through this gate — they serve unconditionally.
    """
    if buddy_help and candidate.peer_id in downloader.buddies:
        return ExchangeDecision.FREE_BUDDY
    for wanted in candidate.active_downloads:
        if wanted in downloader.library:
            return ExchangeDecision.RECIPROCAL
        mine = downloader.cache.get(wanted, 0).bit_count()
        if mine > candidate.cache.get(wanted, 0).bit_count():
            return ExchangeDecision.RECIPROCAL
    if ledger.can_spend(downloader.peer_id, 1):
        return ExchangeDecision.PAY_CREDIT
    return ExchangeDecision.REFUSE


def register_helper(
    downloader: PeerState,
    buddy: PeerState,
    item: ContentItem,
    assist_fetch_allowed: bool = False,
    max_helpers: int = DEFAULT_MAX_HELPERS,
) -> bool:
    """Enlist a buddy to push pieces of `item` to the downloader.

    The buddy qualifies either by already holding pieces (cached or in its
    library — typically captured from a broadcast) or, when assist-fetch is
    allowed (broadcasts off), by joining the swarm itself and relaying. Only
    buddies are accepted, and only up to the helper cap.
    """
    if buddy.peer_id not in downloader.buddies:
        return False
    current = downloader.helpers.setdefault(item.item_id, set())
    if buddy.peer_id in current:
        return False
    if len(current) >= max_helpers:
        return False
    has_pieces = buddy.piece_count(item.item_id, item.piece_count) > 0
    if not has_pieces and not assist_fetch_allowed:
        return False
    current.add(buddy.peer_id)
    return True


# ---------------------------------------------------------------------------
# profile dissemination
# ---------------------------------------------------------------------------


def buddy_broadcast_aggregate(
    inbox: Iterable[tuple[int, PreferenceProfile]],
) -> dict[int, PreferenceProfile]:
    """Collapse uplink submissions into one digest: latest profile per peer,
    duplicates removed. Broadcasting the digest gives every sat-enabled peer
    the same global view in a single step."""
    digest: dict[int, PreferenceProfile] = {}
    for peer_id, profile in inbox:
        digest[peer_id] = profile
    return digest


# ---------------------------------------------------------------------------
# prefetching and cache policy
# ---------------------------------------------------------------------------


def prefetch_tick(
    peer: PeerState,
    graph: SocialGraph,
    profiles: list[PreferenceProfile],
    catalog: dict[int, ContentItem],
    has_buddy_source: Callable[[int], bool],
    active_prefetchers: int = 0,
    limit_active: int | None = None,
) -> int | None:
    """Pick what an idle peer should speculatively download, if anything.

    Candidates are ranked by predicted demand; only items obtainable from at
    least one buddy qualify (prefetch traffic stays inside the friend
    circle). Returns the chosen item id, or None when nothing qualifies or
    the global concurrent-prefetcher cap is reached.
    """
    if limit_active is not None and active_prefetchers >= limit_active:
        return None
    exclude = set(peer.library)
    exclude.update(peer.active_downloads)
    full = {i for i, m in peer.cache.items() if m == catalog[i].full_mask}
    exclude.update(full)
    categories = {i: item.category for i, item in catalog.items()}
    for item_id in predict_demand(graph, profiles, peer.peer_id, categories, exclude=exclude):
        if has_buddy_source(item_id):
            return item_id
    return None


@dataclass
class CacheInsertResult:
    inserted: bool
    evicted: list[int] = field(default_factory=list)


def cache_insert(
    peer: PeerState,
    item_id: int,
    piece_mask: int,
    interest_of: Callable[[int], float],
    capacity: int = DEFAULT_CACHE_CAPACITY,
) -> CacheInsertResult:
    """Put an item into the peer's cache, evicting least-interesting items
    while over capacity.

    Interest is scored by `interest_of`; the freshly inserted item competes
    on equal terms, so a drop below everything already cached bounces right
    back out. Items the peer is actively downloading are never evicted, and
    eviction stops (capacity temporarily exceeded) if only active items
    remain.
    """
    if capacity <= 0:
        return CacheInsertResult(inserted=False)
    if item_id in peer.cache:
        peer.cache[item_id] |= piece_mask
        return CacheInsertResult(inserted=True)
    peer.cache[item_id] = piece_mask
    evicted: list[int] = []
    while len(peer.cache) > capacity:
        victims = [i for i in peer.cache if i not in peer.active_downloads]
        if not victims:
            break
        worst = min(victims, key=lambda i: (interest_of(i), -i))
        del peer.cache[worst]
        evicted.append(worst)
    inserted = item_id in peer.cache
    return CacheInsertResult(inserted=inserted, evicted=evicted)


# ---------------------------------------------------------------------------
# broadcast scheduling
# ---------------------------------------------------------------------------


@dataclass
class BroadcastSchedule:
    """Transponder state: what is on air, what already aired, and when the
    channel frees up. Time is fractional seconds; the step loop lets at most
    one transmission complete per tick."""

    transponder_bps: int = DEFAULT_TRANSPONDER_BPS
    busy_until: float = 0.0
    on_air: tuple[int, float, float] | None = None  # item, start_s, end_s
    history: list[tuple[int, float]] = field(default_factory=list)
    last_start: dict[int, float] = field(default_factory=dict)

    def transmission_seconds(self, item: ContentItem) -> float:
        return item.size_bytes * 8 / self.transponder_bps


def broadcast_scheduler_tick(
    schedule: BroadcastSchedule,
    demand: dict[int, int],
    catalog: dict[int, ContentItem],
    now_s: float,
    threshold: int = DEFAULT_DEMAND_THRESHOLD,
    cooldown_s: float = DEFAULT_BROADCAST_COOLDOWN_S,
) -> int | None:
    """Start the next broadcast if the transponder is free.

    Eligible items need at least `threshold` concurrent downloaders and must
    not have aired within the cooldown window. The highest demand wins, ties
    to the smaller item id. Returns the item id put on air, else None.
    """
    if schedule.busy_until > now_s:
        return None
    best: int | None = None
    best_demand = 0
    for item_id in sorted(demand):
        count = demand[item_id]
        if count < threshold or item_id not in catalog:
            continue
        last = schedule.last_start.get(item_id)
        if last is not None and now_s - last < cooldown_s:
            continue
        if count > best_demand:
            best, best_demand = item_id, count
    if best is None:
        return None
    start = max(now_s, schedule.busy_until)
    end = start + schedule.transmission_seconds(catalog[best])
    schedule.busy_until = end
    schedule.on_air = (best, start, end)
    schedule.history.append((best, start))
    schedule.last_start[best] = start
    return best


def broadcast_completion(schedule: BroadcastSchedule, step_end_s: float) -> int | None:
    """Return the item whose transmission finished by the end of this step,
    clearing the on-air slot. At most one per step by construction."""
    if schedule.on_air is None:
        return None
    item_id, _, end = schedule.on_air
    if end <= step_end_s:
        schedule.on_air = None
        return item_id
    return None
