"""Deterministic discrete-time engine.

Each 60-second tick runs six phases in a fixed order: request arrivals,
probabilistic preference influence, broadcast scheduling and delivery,
bandwidth allocation over all live flows, prefetch starts, and completion
processing. Transfers use a fluid model: a download is a byte counter fed by
max-min-fair flow rates, with whole-piece bookkeeping layered on top for
credits, caches, and the transfer log. Everything is a pure function of
(config, seed).

Scale notes: per-download state lives in numpy arrays indexed by small
integer ids and the per-step cost is a handful of vector operations plus
sparse Python work (flow setup, piece crossings, completions, resolves).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig
from .errors import SimulationInvariantError
from .graphgen import BaParams, SocialGraph, ToParams, assign_sat_peers, generate_ba, generate_toivonen
from .metrics import SATELLITE_SOURCE, DownloadRecord, TransferLog
from .prefs import InfluenceModel, apply_download_feedback, apply_influence, init_profiles
from .protocol import (
    BroadcastSchedule,
    ContentItem,
    CreditLedger,
    ExchangeDecision,
    PeerState,
    TransferKind,
    broadcast_completion,
    broadcast_scheduler_tick,
    cache_insert,
    register_helper,
    seeding_reward,
    select_exchange,
)
from .rng import subsystem_rng

RESOLVE_EVERY = 10    # steps between source-list refreshes per download
PREFETCH_EVERY = 30   # steps between prefetch attempts per peer
_EPS = 1e-6

# download kinds
DL_USER = 0
DL_PREFETCH = 1
DL_ASSIST = 2


# ---------------------------------------------------------------------------
# clocks, links, arrivals
# ---------------------------------------------------------------------------


@dataclass
class SimClock:
    step_seconds: int = 60
    now: int = 0  # step counter

    @property
    def now_s(self) -> float:
        return float(self.now * self.step_seconds)

    def advance(self) -> None:
        self.now += 1


@dataclass
class LinkBudget:
    download_bps: int = 8_000_000
    upload_bps: int = 1_000_000


@dataclass
class ArrivalProcess:
    mean_wait_seconds: float = 7200.0
    kind: str = "exponential"  # exponential | fixed | uniform


def sample_wait(process: ArrivalProcess, rng: random.Random) -> float:
    """Draw one strictly positive think-time between downloads."""
    mean = process.mean_wait_seconds
    if process.kind == "fixed":
        return mean
    if process.kind == "uniform":
        return max(rng.uniform(0.0, 2.0 * mean), _EPS)
    return max(rng.expovariate(1.0 / mean), _EPS)


# ---------------------------------------------------------------------------
# max-min fair bandwidth allocation
# ---------------------------------------------------------------------------


def allocate_bandwidth(
    src: np.ndarray,
    dst: np.ndarray,
    rate_cap: np.ndarray,
    priority: np.ndarray,
    upload_caps: np.ndarray,
    download_caps: np.ndarray,
) -> np.ndarray:
    """Max-min fair rates (bits/s) for each flow under per-peer upload and
    download caps and per-flow rate caps.

    Priority flows (helpers pushing with their full upload) are filled
    first; whatever capacity remains is shared by the rest. Within a phase
    all flows rise together until an entity (uploader, downloader, or flow
    cap) saturates, which freezes the flows it bottlenecks — standard
    progressive filling.
    """
    rates = np.zeros(len(src))
    if len(src) == 0:
        return rates
    up_res = upload_caps.astype(float).copy()
    down_res = download_caps.astype(float).copy()
    for phase_mask in (priority, ~priority):
        idx = np.flatnonzero(phase_mask)
        if len(idx):
            rates[idx] = _progressive_fill(src[idx], dst[idx], rate_cap[idx], up_res, down_res)
    return rates


def _progressive_fill(src, dst, cap, up_res, down_res) -> np.ndarray:
    """Fill one phase; mutates the residual cap arrays in place."""
    m = len(src)
    n = len(up_res)
    rates = np.zeros(m)
    active = np.ones(m, dtype=bool)
    tol = 1e-9
    for _ in range(2 * (m + n) + 4):
        active &= (cap - rates) > tol
        active &= up_res[src] > tol
        active &= down_res[dst] > tol
        live = np.flatnonzero(active)
        if not len(live):
            break
        cnt_up = np.bincount(src[live], minlength=n)
        cnt_dn = np.bincount(dst[live], minlength=n)
        with np.errstate(divide="ignore"):
            fill_up = np.where(cnt_up > 0, up_res / np.maximum(cnt_up, 1), np.inf)
            fill_dn = np.where(cnt_dn > 0, down_res / np.maximum(cnt_dn, 1), np.inf)
        headroom = np.minimum(fill_up[src[live]], fill_dn[dst[live]])
        headroom = np.minimum(headroom, cap[live] - rates[live])
        delta = float(headroom.min())
        if not math.isfinite(delta) or delta <= 0:
            break
        rates[live] += delta
        up_res -= np.bincount(src[live], minlength=n) * delta
        down_res -= np.bincount(dst[live], minlength=n) * delta
    np.maximum(up_res, 0.0, out=up_res)
    np.maximum(down_res, 0.0, out=down_res)
    return rates


# ---------------------------------------------------------------------------
# flow bookkeeping
# ---------------------------------------------------------------------------

# how a flow's available bytes are bounded
AVAIL_FULL = 0    # source holds the complete item
AVAIL_TRACK = 1   # source is downloading it too: bounded by its progress lead
AVAIL_STATIC = 2  # source holds a frozen partial copy (cached pieces)
AVAIL_RELAY = 3   # assist relay: bounded by helper progress not yet forwarded


class SourceEntry:
    """One live flow: a source feeding one download."""

    __slots__ = (
        "entry_id", "dl", "src", "kind", "paid", "mint", "priority", "half",
        "friend", "avail_mode", "avail_ref", "flushed_bytes", "last_acc",
        "created_step", "live",
    )

    def __init__(self, entry_id, dl, src, kind, created_step, *, paid=False,
                 mint=False, priority=False, half=False, friend=False,
                 avail_mode=AVAIL_FULL, avail_ref=0):
        self.entry_id = entry_id
        self.dl = dl
        self.src = src
        self.kind = kind
        self.paid = paid
        self.mint = mint
        self.priority = priority
        self.half = half
        self.friend = friend
        self.avail_mode = avail_mode
        self.avail_ref = avail_ref
        self.flushed_bytes = 0
        self.last_acc = 0.0
        self.created_step = created_step
        self.live = True


class _GrowF64:
    """Append-friendly float64 array addressed by integer id."""

    def __init__(self, capacity: int = 1024):
        self.data = np.zeros(capacity)

    def ensure(self, size: int) -> None:
        if size > len(self.data):
            grown = np.zeros(max(size, 2 * len(self.data)))
            grown[: len(self.data)] = self.data
            self.data = grown


# ---------------------------------------------------------------------------
# the world
# ---------------------------------------------------------------------------


class World:
    """Full simulation state; build with init_world, advance with tick."""

    def __init__(self, config: ScenarioConfig, graph: SocialGraph, profiles,
                 peers, catalog, ledger, clock, links, arrivals, schedule, rngs):
        self.config = config
        self.graph = graph
        self.profiles = profiles
        self.peers: list[PeerState] = peers
        self.catalog: dict[int, ContentItem] = catalog
        self.ledger: CreditLedger = ledger
        self.clock: SimClock = clock
        self.links: LinkBudget = links
        self.arrivals: ArrivalProcess = arrivals
        self.schedule: BroadcastSchedule = schedule
        self.rngs: dict[str, random.Random] = rngs

        n = graph.node_count
        # dense mirror of self.profiles for vectorized scoring
        self.profile_matrix = np.zeros((n, config.categories))
        for node, profile in enumerate(profiles):
            for cat, q in profile.items():
                self.profile_matrix[node, cat] = q
        self.item_category = np.array(
            [catalog[i].category for i in sorted(catalog)], dtype=np.int64
        )
        self.item_piece_np = np.array(
            [catalog[i].piece_size_bytes for i in sorted(catalog)], dtype=np.int64
        )

        # download table (struct-of-arrays, grows monotonically)
        self.dl_count = 0
        cap = 1024
        self.dl_peer = np.zeros(cap, dtype=np.int64)
        self.dl_item = np.zeros(cap, dtype=np.int64)
        self.dl_bytes = np.zeros(cap)
        self.dl_size = np.zeros(cap)
        self.dl_requested = np.zeros(cap)
        self.dl_cache_bytes = np.zeros(cap)
        self.dl_friend_bytes = np.zeros(cap)
        self.dl_nonfriend_bytes = np.zeros(cap)
        self.dl_active = np.zeros(cap, dtype=bool)
        self.dl_kind = np.zeros(cap, dtype=np.int8)
        self.dl_assist_for = np.full(cap, -1, dtype=np.int64)
        self.dl_pieces = np.zeros(cap, dtype=np.int64)
        self.dl_sources: list[list[SourceEntry]] = []

        # per-flow byte accumulators addressed by entry id
        self.entry_count = 0
        self._acc = _GrowF64()
        self._piece_acc = _GrowF64()

        # indexes
        self.active_ids: set[int] = set()
        self.active_by_item: dict[int, set[int]] = {}
        self.holders: dict[int, set[int]] = {}  # peers retaining pieces per item
        self.entries_by_src_item: dict[tuple[int, int], list[SourceEntry]] = {}
        self.peer_user_dl = [-1] * n
        self.peer_prefetch_dl = [-1] * n
        self.peer_assist_dl = [-1] * n
        self.upload_slots_used = [0] * n
        self.seeder_ids: list[int] = [p.peer_id for p in peers if p.is_seeder]
        self.cache_scores: list[dict[int, float]] = [dict() for _ in range(n)]

        # results
        self.log = TransferLog()
        self.records: list[DownloadRecord] = []
        self.cap_violations = 0
        self.completed_user_downloads = 0
        self.flush_every = max(1, min(60, config.bucket_s // max(config.step_s, 1)))

    # -- small helpers ----------------------------------------------------

    @property
    def step_s(self) -> int:
        return self.clock.step_seconds

    def piece_size(self, item_id: int) -> int:
        return self.catalog[item_id].piece_size_bytes

    def held_bytes(self, peer_id: int, item_id: int) -> int:
        """Bytes of an item a peer holds outside any active download."""
        item = self.catalog[item_id]
        if item_id in self.peers[peer_id].library:
            return item.size_bytes
        mask = self.peers[peer_id].cache.get(item_id, 0)
        return min(mask.bit_count() * item.piece_size_bytes, item.size_bytes)

    def interest_score(self, peer_id: int, category: int) -> float:
        """How much a peer or any of its buddies cares about a category;
        drives cache eviction and broadcast capture."""
        own = float(self.profile_matrix[peer_id, category])
        buddies = self.graph.adjacency[peer_id]
        if buddies:
            col = self.profile_matrix[:, category]
            own = max(own, max(float(col[b]) for b in buddies))
        return own

    def set_profile(self, node: int, profile: dict[int, float]) -> None:
        self.profiles[node] = profile
        row = self.profile_matrix[node]
        row[:] = 0.0
        for cat, q in profile.items():
            row[cat] = q

    # -- download lifecycle ----------------------------------------------

    def _new_download(self, peer_id, item_id, kind, start_bytes, assist_for=-1) -> int:
        if self.dl_count == len(self.dl_bytes):
            self._grow_downloads()
        d = self.dl_count
        self.dl_count += 1
        self.dl_peer[d] = peer_id
        self.dl_item[d] = item_id
        self.dl_bytes[d] = start_bytes
        self.dl_size[d] = self.catalog[item_id].size_bytes
        self.dl_requested[d] = self.clock.now_s
        self.dl_cache_bytes[d] = start_bytes
        self.dl_friend_bytes[d] = 0.0
        self.dl_nonfriend_bytes[d] = 0.0
        self.dl_active[d] = True
        self.dl_kind[d] = kind
        self.dl_assist_for[d] = assist_for
        self.dl_pieces[d] = int(start_bytes) // self.piece_size(item_id)
        self.dl_sources.append([])
        self.active_ids.add(d)
        self.active_by_item.setdefault(item_id, set()).add(d)
        self.peers[peer_id].active_downloads.add(item_id)
        return d

    def _grow_downloads(self) -> None:
        for name in ("dl_peer", "dl_item", "dl_bytes", "dl_size", "dl_requested",
                     "dl_cache_bytes", "dl_friend_bytes", "dl_nonfriend_bytes",
                     "dl_active", "dl_kind", "dl_assist_for", "dl_pieces"):
            old = getattr(self, name)
            grown = np.zeros(2 * len(old), dtype=old.dtype)
            if name == "dl_assist_for":
                grown.fill(-1)
            grown[: len(old)] = old
            setattr(self, name, grown)

    def _drop_download(self, d: int) -> None:
        """Remove a download from all live indexes (no record written)."""
        item_id = int(self.dl_item[d])
        peer_id = int(self.dl_peer[d])
        for entry in self.dl_sources[d]:
            self._kill_entry(entry)
        self.dl_sources[d] = []
        self.dl_active[d] = False
        self.active_ids.discard(d)
        members = self.active_by_item.get(item_id)
        if members is not None:
            members.discard(d)
            if not members:
                del self.active_by_item[item_id]
        self.peers[peer_id].active_downloads.discard(item_id)
        kind = int(self.dl_kind[d])
        if kind == DL_USER and self.peer_user_dl[peer_id] == d:
            self.peer_user_dl[peer_id] = -1
        elif kind == DL_PREFETCH and self.peer_prefetch_dl[peer_id] == d:
            self.peer_prefetch_dl[peer_id] = -1
        elif kind == DL_ASSIST and self.peer_assist_dl[peer_id] == d:
            self.peer_assist_dl[peer_id] = -1

    # -- flow entry lifecycle --------------------------------------------

    def _new_entry(self, d: int, src: int, kind: TransferKind, **kwargs) -> SourceEntry:
        entry = SourceEntry(self.entry_count, d, src, int(kind), self.clock.now, **kwargs)
        self.entry_count += 1
        self._acc.ensure(self.entry_count)
        self._piece_acc.ensure(self.entry_count)
        self.dl_sources[d].append(entry)
        self.upload_slots_used[src] += 1
        key = (src, int(self.dl_item[d]))
        self.entries_by_src_item.setdefault(key, []).append(entry)
        return entry

    def _kill_entry(self, entry: SourceEntry) -> None:
        if not entry.live:
            return
        entry.live = False
        self.upload_slots_used[entry.src] -= 1
        self._flush_entry(entry)

    def _flush_entry(self, entry: SourceEntry) -> None:
        """Emit the not-yet-logged bytes of one flow as a log row."""
        acc = float(self._acc.data[entry.entry_id])
        delta = int(round(acc)) - entry.flushed_bytes
        if delta <= 0:
            return
        entry.flushed_bytes += delta
        item_id = int(self.dl_item[entry.dl])
        piece = self.piece_size(item_id)
        self.log.append(
            int(self.clock.now_s), entry.src, int(self.dl_peer[entry.dl]),
            item_id, delta // piece, delta, entry.kind, entry.friend,
        )

    def flush_all(self) -> None:
        for d in sorted(self.active_ids):
            for entry in self.dl_sources[d]:
                if entry.live:
                    self._flush_entry(entry)

    def kill_entries_for_holder(self, src: int, item_id: int) -> None:
        """A held copy vanished (cache eviction): stop every flow drawing on
        it. Flows tracking the source's own active download are unaffected."""
        entries = self.entries_by_src_item.pop((src, item_id), None)
        if not entries:
            return
        survivors = []
        for entry in entries:
            if entry.live and entry.avail_mode != AVAIL_TRACK:
                self._kill_entry(entry)
            elif entry.live:
                survivors.append(entry)
        if survivors:
            self.entries_by_src_item[(src, item_id)] = survivors


# ---------------------------------------------------------------------------
# world construction
# ---------------------------------------------------------------------------


def init_world(config: ScenarioConfig) -> World:
    """Build a ready-to-run world — graph, dish flags, profiles, seeders
    holding the full catalog — all seeded from config.seed."""
    config.validate()
    seed = config.seed

    graph_rng = subsystem_rng(seed, "graph")
    if config.graph_model == "ba":
        graph = generate_ba(config.node_count, BaParams(config.ba_m0, config.ba_m), graph_rng)
    else:
        graph = generate_toivonen(
            config.node_count, ToParams(dict(config.to_r_choices), config.to_p_mean), graph_rng
        )
    graph = assign_sat_peers(graph, config.sat_ratio, subsystem_rng(seed, "flags"))

    profiles = init_profiles(config.node_count, config.categories, subsystem_rng(seed, "profiles"))

    catalog = {
        i: ContentItem(i, i % config.categories, config.item_size_bytes, config.piece_size_bytes)
        for i in range(config.catalog_size)
    }

    protocol_rng = subsystem_rng(seed, "protocol")
    seeder_ids = sorted(protocol_rng.sample(range(config.node_count), config.seeders))
    seeder_set = set(seeder_ids)

    arrivals = ArrivalProcess(config.wait_mean_s, config.wait_distribution)
    arrival_rng = subsystem_rng(seed, "arrivals")
    peers = []
    for p in range(config.node_count):
        is_seeder = p in seeder_set
        peers.append(
            PeerState(
                peer_id=p,
                sat_enabled=graph.sat_enabled[p],
                buddies=frozenset(graph.adjacency[p]),
                is_seeder=is_seeder,
                library=set(catalog) if is_seeder else set(),
                idle_until=math.inf if is_seeder else sample_wait(arrivals, arrival_rng),
            )
        )

    rngs = {name: subsystem_rng(seed, name) for name in ("mi", "feedback", "tracker")}
    rngs["arrivals"] = arrival_rng

    return World(
        config=config,
        graph=graph,
        profiles=profiles,
        peers=peers,
        catalog=catalog,
        ledger=CreditLedger(config.credit_limit, enabled=config.credits_enabled),
        clock=SimClock(step_seconds=config.step_s),
        links=LinkBudget(config.download_bps, config.upload_bps),
        arrivals=arrivals,
        schedule=BroadcastSchedule(transponder_bps=config.transponder_bps),
        rngs=rngs,
    )


# ---------------------------------------------------------------------------
# tick phases
# ---------------------------------------------------------------------------


def tick(world: World) -> None:
    """Advance the world by one step (six phases in fixed order)."""
    _phase_arrivals(world)
    _phase_influence(world)
    if world.config.broadcast:
        _phase_broadcast(world)
    _phase_transfers(world)
    if world.config.prefetch:
        _phase_prefetch(world)
    _phase_completions(world)
    if world.clock.now % world.flush_every == world.flush_every - 1:
        world.flush_all()
        world.ledger.check_conservation()
    world.clock.advance()


def run_world(world: World) -> None:
    steps = world.config.sim_duration_s // world.config.step_s
    while world.clock.now < steps:
        tick(world)
    world.flush_all()
    world.ledger.check_conservation()


# -- phase 1: arrivals ------------------------------------------------------


def _phase_arrivals(world: World) -> None:
    now_s = world.clock.now_s
    rng = world.rngs["arrivals"]
    for p in range(world.graph.node_count):
        peer = world.peers[p]
        if peer.is_seeder or peer.idle_until > now_s or world.peer_user_dl[p] >= 0:
            continue
        item_id = _choose_item(world, p, rng)
        if item_id is None:
            peer.idle_until = now_s + sample_wait(world.arrivals, rng)
            continue
        _start_user_download(world, p, item_id)


def _choose_item(world: World, peer_id: int, rng: random.Random) -> int | None:
    """Pick the next file a user wants: a category drawn proportionally to
    the profile's quantifiers, then an unowned item of that category, falling
    back to any unowned item when the category is exhausted."""
    peer = world.peers[peer_id]
    profile = world.profiles[peer_id]
    categories = world.config.categories
    if profile:
        cats = sorted(profile)
        weights = [profile[c] for c in cats]
        cat = rng.choices(cats, weights=weights, k=1)[0]
        in_cat = [
            i for i in range(cat, world.config.catalog_size, categories)
            if i not in peer.library
        ]
        if in_cat:
            return in_cat[rng.randrange(len(in_cat))]
    unowned = world.config.catalog_size - len(peer.library)
    if unowned <= 0:
        return None
    pick = rng.randrange(unowned)
    for i in range(world.config.catalog_size):
        if i in peer.library:
            continue
        if pick == 0:
            return i
        pick -= 1
    return None


def _start_user_download(world: World, peer_id: int, item_id: int) -> None:
    peer = world.peers[peer_id]
    now_s = world.clock.now_s
    item = world.catalog[item_id]

    # a running prefetch of the same item becomes the user download; any
    # other speculative work stops — the peer is no longer idle
    carried = 0
    pf = world.peer_prefetch_dl[peer_id]
    if pf >= 0:
        if int(world.dl_item[pf]) == item_id:
            carried = int(world.dl_bytes[pf])
        _cancel_speculative(world, pf)
    assist = world.peer_assist_dl[peer_id]
    if assist >= 0:
        if int(world.dl_item[assist]) == item_id:
            carried = max(carried, int(world.dl_bytes[assist]))
        _cancel_speculative(world, assist)

    held = max(world.held_bytes(peer_id, item_id), carried)
    if held >= item.size_bytes:
        # instant completion straight from the local cache
        peer.cache.pop(item_id, None)
        world.cache_scores[peer_id].pop(item_id, None)
        peer.library.add(item_id)
        world.holders.setdefault(item_id, set()).add(peer_id)
        world.records.append(
            DownloadRecord(peer_id, item_id, now_s, now_s, 0, 0, item.size_bytes, False)
        )
        world.completed_user_downloads += 1
        _apply_feedback(world, peer_id, item.category)
        peer.idle_until = now_s + sample_wait(world.arrivals, world.rngs["arrivals"])
        return

    d = world._new_download(peer_id, item_id, kind=DL_USER, start_bytes=held)
    world.peer_user_dl[peer_id] = d
    _resolve_sources(world, d)


def _cancel_speculative(world: World, d: int) -> None:
    """Abort a prefetch or assist download, banking whole pieces into the
    cache and releasing any helper registration."""
    peer_id = int(world.dl_peer[d])
    item_id = int(world.dl_item[d])
    assist_for = int(world.dl_assist_for[d])
    pieces = int(world.dl_bytes[d]) // world.piece_size(item_id)
    world._drop_download(d)
    if pieces > 0 and item_id not in world.peers[peer_id].library:
        _cache_item(world, peer_id, item_id, (1 << pieces) - 1)
    if assist_for >= 0:
        collector = world.peers[assist_for]
        helpers = collector.helpers.get(item_id)
        if helpers is not None:
            helpers.discard(peer_id)
        for entry in world.entries_by_src_item.get((peer_id, item_id), []):
            if entry.live and entry.avail_mode == AVAIL_RELAY and entry.avail_ref == d:
                world._kill_entry(entry)


# -- phase 2: influence ------------------------------------------------------


_MI_BY_TOKEN = {m.value: m for m in InfluenceModel}


def _phase_influence(world: World) -> None:
    token = world.config.mi_model
    if token == "off" or world.config.p_mi <= 0:
        return
    model = _MI_BY_TOKEN[token]
    rng = world.rngs["mi"]
    p_mi = world.config.p_mi
    pending: list[tuple[int, dict[int, float]]] = []
    for node in range(world.graph.node_count):
        if rng.random() >= p_mi:
            continue
        updated = apply_influence(model, world.graph, world.profiles, node, rng)
        if updated is not world.profiles[node]:
            pending.append((node, updated))
    for node, profile in pending:
        world.set_profile(node, profile)


def _apply_feedback(world: World, peer_id: int, category: int) -> None:
    negative = world.rngs["feedback"].random() < world.config.negative_feedback_prob
    updated = apply_download_feedback(
        world.profiles, peer_id, category, negative, world.config.feedback_strength
    )
    world.set_profile(peer_id, updated)


# -- phase 3: broadcast ------------------------------------------------------


def _phase_broadcast(world: World) -> None:
    demand: dict[int, int] = {}
    for item_id, members in world.active_by_item.items():
        count = sum(1 for d in members if world.dl_kind[d] == DL_USER)
        if count:
            demand[item_id] = count
    broadcast_scheduler_tick(
        world.schedule, demand, world.catalog, world.clock.now_s,
        world.config.demand_threshold, world.config.broadcast_cooldown_s,
    )
    finished = broadcast_completion(world.schedule, world.clock.now_s + world.step_s)
    if finished is not None:
        _deliver_broadcast(world, finished)


def _deliver_broadcast(world: World, item_id: int) -> None:
    """Every dish-equipped peer receives the item at once: active downloads
    of it complete off the air, and idle peers capture it into their caches
    when it matches their own or a buddy's tastes — or when a buddy is pulling
    the item over unicast right now, in which case the capture is what turns
    the dish owner into a full-upload helper for that friend."""
    item = world.catalog[item_id]
    piece = item.piece_size_bytes
    now = int(world.clock.now_s)
    flags = world.graph.sat_enabled
    bkind = int(TransferKind.BROADCAST)

    for d in sorted(world.active_by_item.get(item_id, ())):
        peer_id = int(world.dl_peer[d])
        if not flags[peer_id]:
            continue
        remaining = int(round(world.dl_size[d] - world.dl_bytes[d]))
        if remaining <= 0:
            continue
        world.dl_cache_bytes[d] += remaining
        world.dl_bytes[d] = world.dl_size[d]
        world.log.append(now, SATELLITE_SOURCE, peer_id, item_id,
                         remaining // piece, remaining, bkind, False)

    # everyone still mid-download after the off-air completions; their
    # dish-equipped buddies capture on their behalf even when the item
    # matches nobody's taste
    needy = {
        int(world.dl_peer[d])
        for d in world.active_by_item.get(item_id, ())
        if world.dl_kind[d] == DL_USER and world.dl_bytes[d] < world.dl_size[d]
    }
    help_on = world.config.buddy_help and bool(needy)

    capacity = world.config.cache_capacity
    for p in range(world.graph.node_count):
        if not flags[p]:
            continue
        peer = world.peers[p]
        if item_id in peer.library or item_id in peer.active_downloads or peer.is_seeder:
            continue
        held_mask = peer.cache.get(item_id, 0)
        if held_mask == item.full_mask:
            continue
        score = world.interest_score(p, item.category)
        stored = world.cache_scores[p]
        if len(peer.cache) >= capacity and item_id not in peer.cache:
            cheapest = min(stored.values(), default=0.0)
            if score <= cheapest:
                if not (help_on and not needy.isdisjoint(world.graph.adjacency[p])):
                    continue
                # admitted for the friend's sake but kept at the bottom of
                # the ranking: first out once anything genuinely wanted lands
                score = cheapest + 1e-9
        missing_pieces = item.piece_count - held_mask.bit_count()
        missing_bytes = item.size_bytes - held_mask.bit_count() * piece
        if _cache_item(world, p, item_id, item.full_mask, score=score):
            world.log.append(now, SATELLITE_SOURCE, p, item_id,
                             missing_pieces, missing_bytes, bkind, False)

    # the transmission doubles as an announcement: downloads still running
    # refresh their source lists at once instead of waiting out the cadence
    for d in sorted(world.active_by_item.get(item_id, ())):
        if world.dl_bytes[d] < world.dl_size[d]:
            _resolve_sources(world, d)


def _cache_item(world: World, peer_id: int, item_id: int, mask: int,
                score: float | None = None) -> bool:
    """Insert pieces into a peer's cache through the eviction policy,
    keeping the holder index and stored interest scores in sync."""
    peer = world.peers[peer_id]
    stored = world.cache_scores[peer_id]
    if score is None:
        score = world.interest_score(peer_id, world.catalog[item_id].category)
    stored[item_id] = score
    result = cache_insert(
        peer, item_id, mask, lambda i: stored.get(i, 0.0), world.config.cache_capacity
    )
    for evicted in result.evicted:
        stored.pop(evicted, None)
        world.kill_entries_for_holder(peer_id, evicted)
        members = world.holders.get(evicted)
        if members is not None:
            members.discard(peer_id)
    if result.inserted:
        world.holders.setdefault(item_id, set()).add(peer_id)
    else:
        stored.pop(item_id, None)
    return result.inserted


# -- phase 4: transfers ------------------------------------------------------


def _phase_transfers(world: World) -> None:
    step = world.clock.now
    for d in sorted(world.active_ids):
        if step % RESOLVE_EVERY == d % RESOLVE_EVERY:
            _resolve_sources(world, d)

    f_src: list[int] = []
    f_dst: list[int] = []
    f_dl: list[int] = []
    entries: list[SourceEntry] = []
    for d in sorted(world.active_ids):
        dst_peer = int(world.dl_peer[d])
        live = [e for e in world.dl_sources[d] if e.live]
        if len(live) != len(world.dl_sources[d]):
            world.dl_sources[d] = live
        for entry in live:
            f_src.append(entry.src)
            f_dst.append(dst_peer)
            f_dl.append(d)
            entries.append(entry)
    if not entries:
        return

    m = len(entries)
    src = np.array(f_src, dtype=np.int64)
    dst = np.array(f_dst, dtype=np.int64)
    dl = np.array(f_dl, dtype=np.int64)
    entry_ids = np.fromiter((e.entry_id for e in entries), dtype=np.int64, count=m)
    mode = np.fromiter((e.avail_mode for e in entries), dtype=np.int64, count=m)
    ref = np.fromiter((e.avail_ref for e in entries), dtype=np.int64, count=m)
    priority = np.fromiter((e.priority for e in entries), dtype=bool, count=m)
    half = np.fromiter((e.half for e in entries), dtype=bool, count=m)
    friend = np.fromiter((e.friend for e in entries), dtype=bool, count=m)
    billable = np.fromiter((e.paid or e.mint for e in entries), dtype=bool, count=m)
    step_s = world.step_s

    # per-flow byte caps from availability and remaining need
    avail = np.full(m, np.inf)
    sel = mode == AVAIL_TRACK
    avail[sel] = world.dl_bytes[ref[sel]] - world.dl_bytes[dl[sel]]
    sel = mode == AVAIL_STATIC
    avail[sel] = ref[sel] - world.dl_bytes[dl[sel]]
    sel = mode == AVAIL_RELAY
    avail[sel] = world.dl_bytes[ref[sel]] - world._acc.data[entry_ids[sel]]
    remaining = world.dl_size[dl] - world.dl_bytes[dl]
    byte_cap = np.minimum(avail, remaining)
    np.maximum(byte_cap, 0.0, out=byte_cap)
    rate_cap = byte_cap * 8.0 / step_s
    rate_cap[half] = np.minimum(rate_cap[half], 0.5 * world.links.upload_bps)

    n = world.graph.node_count
    up_caps = np.full(n, float(world.links.upload_bps))
    down_caps = np.full(n, float(world.links.download_bps))
    rates = allocate_bandwidth(src, dst, rate_cap, priority, up_caps, down_caps)

    # the allocator must never oversubscribe a link
    tol = 1e-6
    up_use = np.bincount(src, weights=rates, minlength=n)
    down_use = np.bincount(dst, weights=rates, minlength=n)
    if (up_use > world.links.upload_bps * (1 + tol)).any() or (
        down_use > world.links.download_bps * (1 + tol)
    ).any():
        world.cap_violations += 1

    step_bytes = rates * step_s / 8.0

    # never deliver past the end of the file: scale the final step's flows
    delivered = np.bincount(dl, weights=step_bytes, minlength=world.dl_count)
    remaining_all = world.dl_size[: world.dl_count] - world.dl_bytes[: world.dl_count]
    for over_d in np.flatnonzero(delivered > remaining_all + 1e-9):
        factor = remaining_all[over_d] / delivered[over_d]
        sel = dl == over_d
        step_bytes[sel] *= factor

    np.add.at(world.dl_bytes, dl, step_bytes)
    np.add.at(world.dl_friend_bytes, dl[friend], step_bytes[friend])
    np.add.at(world.dl_nonfriend_bytes, dl[~friend], step_bytes[~friend])
    np.add.at(world._acc.data, entry_ids, step_bytes)
    np.add.at(world._piece_acc.data, entry_ids[billable], step_bytes[billable])

    # sparse piece-crossing work: credit charges and seeding rewards
    for i in np.flatnonzero(billable):
        entry = entries[i]
        if not entry.live:
            continue
        piece = world.piece_size(int(world.dl_item[entry.dl]))
        crossed = int(world._piece_acc.data[entry.entry_id] // piece)
        if crossed <= 0:
            continue
        world._piece_acc.data[entry.entry_id] -= crossed * piece
        if entry.paid:
            if not world.ledger.transfer(int(dst[i]), entry.src, crossed):
                world._kill_entry(entry)
        elif entry.mint:
            seeding_reward(world.ledger, entry.src, crossed)

    # keep piece-bitmaps in step with fluid progress (reciprocity and
    # helper eligibility read them)
    count = world.dl_count
    piece_sizes = world.item_piece_np[world.dl_item[:count]]
    new_pieces = (world.dl_bytes[:count] // piece_sizes).astype(np.int64)
    moved = np.flatnonzero((new_pieces > world.dl_pieces[:count]) & world.dl_active[:count])
    for moved_d in moved:
        world.dl_pieces[moved_d] = int(new_pieces[moved_d])
        peer = world.peers[int(world.dl_peer[moved_d])]
        item_id = int(world.dl_item[moved_d])
        if item_id not in peer.library:
            peer.cache[item_id] = (1 << int(new_pieces[moved_d])) - 1


def _resolve_sources(world: World, d: int) -> None:
    """Refresh one download's source list: prune dead weight, recruit
    helpers, admit swarm candidates under the exchange rules."""
    config = world.config
    peer_id = int(world.dl_peer[d])
    item_id = int(world.dl_item[d])
    item = world.catalog[item_id]
    peer = world.peers[peer_id]
    dl_kind = int(world.dl_kind[d])
    my_bytes = world.dl_bytes[d]

    # prune: dead entries, and held-copy flows that produced nothing for a
    # full window (progress-linked flows legitimately stall, so they stay)
    kept: list[SourceEntry] = []
    for entry in world.dl_sources[d]:
        if not entry.live:
            continue
        acc = float(world._acc.data[entry.entry_id])
        idle_window = acc - entry.last_acc < 0.5
        entry.last_acc = acc
        if (
            idle_window
            and entry.avail_mode in (AVAIL_FULL, AVAIL_STATIC)
            and world.clock.now - entry.created_step >= RESOLVE_EVERY
        ):
            world._kill_entry(entry)
            continue
        kept.append(entry)
    world.dl_sources[d] = kept
    current_srcs = {e.src for e in kept}
    budget = config.max_sources - len(kept)
    if budget <= 0:
        return

    if dl_kind == DL_PREFETCH:  # prefetch draws on buddies only
        for src in _buddy_holder_candidates(world, peer, item_id):
            if budget <= 0:
                break
            if src in current_srcs or world.upload_slots_used[src] >= config.upload_slots:
                continue
            entry = _make_holder_entry(
                world, d, src, item, kind=TransferKind.PREFETCH,
                paid=not config.buddy_help and config.credits_enabled, friend=True,
            )
            if entry is not None:
                current_srcs.add(src)
                budget -= 1
        return

    if dl_kind == DL_USER and config.buddy_help:
        budget = _recruit_helpers(world, d, peer, item, current_srcs, budget)
        if budget <= 0:
            return

    # swarm candidates: seeders, co-leechers with a progress lead, and (with
    # social service on) buddies retaining a copy
    pool: list[int] = [s for s in world.seeder_ids if s != peer_id]
    for other_d in sorted(world.active_by_item.get(item_id, ())):
        if other_d == d:
            continue
        other_peer = int(world.dl_peer[other_d])
        if other_peer != peer_id and world.dl_bytes[other_d] > my_bytes:
            pool.append(other_peer)
    if config.buddy_help or config.locality_only:
        pool.extend(_buddy_holder_candidates(world, peer, item_id))

    seen: set[int] = set()
    pool = [s for s in pool if not (s in seen or seen.add(s))]
    if not peer.sat_enabled and len(pool) > config.tracker_sample:
        pool = sorted(world.rngs["tracker"].sample(pool, config.tracker_sample))

    rotate = world.clock.now % max(world.graph.node_count, 1)

    def order_key(src: int):
        local = 0 if (config.locality_only and src in peer.buddies) else 1
        return (local, (src - rotate) % world.graph.node_count)

    for src in sorted(pool, key=order_key):
        if budget <= 0:
            break
        if src in current_srcs or world.upload_slots_used[src] >= config.upload_slots:
            continue
        entry = _admit_swarm_source(world, d, peer, src, item)
        if entry is not None:
            current_srcs.add(src)
            budget -= 1


def _buddy_holder_candidates(world: World, peer: PeerState, item_id: int) -> list[int]:
    holders = world.holders.get(item_id, ())
    return sorted(b for b in peer.buddies if b in holders or world.peers[b].is_seeder)


def _make_holder_entry(world: World, d: int, src: int, item: ContentItem,
                       kind: TransferKind, paid: bool, friend: bool,
                       priority: bool = False) -> SourceEntry | None:
    """Entry for a source serving out of held content (library or cache)."""
    held = world.held_bytes(src, item.item_id)
    if held >= item.size_bytes:
        mode, ref = AVAIL_FULL, 0
    elif held > world.dl_bytes[d]:
        mode, ref = AVAIL_STATIC, held
    else:
        return None
    if paid and not world.ledger.can_spend(int(world.dl_peer[d]), 1):
        return None
    mint = (
        kind == TransferKind.RECIPROCAL
        and not friend
        and world.config.credits_enabled
        and item.item_id in world.peers[src].library
    )
    return world._new_entry(
        d, src, kind, paid=paid, mint=mint, priority=priority,
        friend=friend, avail_mode=mode, avail_ref=ref,
    )


def _recruit_helpers(world: World, d: int, peer: PeerState, item: ContentItem,
                     current_srcs: set[int], budget: int) -> int:
    """Buddies push held pieces with full-upload priority; with broadcasts
    off, idle buddies without pieces join the swarm themselves and relay at
    half upload."""
    config = world.config
    item_id = item.item_id

    candidates = _buddy_holder_candidates(world, peer, item_id)
    # dish-equipped buddies first: theirs are the broadcast-fed caches
    candidates.sort(key=lambda b: (not world.peers[b].sat_enabled, b))
    for b in candidates:
        if budget <= 0:
            return 0
        if b in current_srcs or world.upload_slots_used[b] >= config.upload_slots:
            continue
        if not register_helper(peer, world.peers[b], item, max_helpers=config.max_helpers):
            continue
        entry = _make_holder_entry(
            world, d, b, item, kind=TransferKind.BUDDY, paid=False,
            friend=True, priority=True,
        )
        if entry is None:
            peer.helpers[item_id].discard(b)
            continue
        current_srcs.add(b)
        budget -= 1

    if config.broadcast or budget <= 0:
        return budget
    for b in sorted(peer.buddies):
        if budget <= 0 or len(peer.helpers.get(item_id, ())) >= config.max_helpers:
            break
        helper = world.peers[b]
        if (
            b in current_srcs
            or helper.is_seeder
            or world.peer_user_dl[b] >= 0
            or world.peer_assist_dl[b] >= 0
            or item_id in helper.library
            or item_id in helper.active_downloads
            or world.upload_slots_used[b] >= config.upload_slots
        ):
            continue
        if not register_helper(peer, helper, item, assist_fetch_allowed=True,
                               max_helpers=config.max_helpers):
            continue
        # the helper opens its own swarm download of the item and relays
        assist_d = world._new_download(b, item_id, kind=DL_ASSIST, start_bytes=0,
                                       assist_for=peer.peer_id)
        world.peer_assist_dl[b] = assist_d
        pf = world.peer_prefetch_dl[b]
        if pf >= 0:
            _cancel_speculative(world, pf)
        _resolve_sources(world, assist_d)
        world._new_entry(
            d, b, TransferKind.BUDDY, priority=True, half=True, friend=True,
            avail_mode=AVAIL_RELAY, avail_ref=assist_d,
        )
        current_srcs.add(b)
        budget -= 1
    return budget


def _admit_swarm_source(world: World, d: int, peer: PeerState, src: int,
                        item: ContentItem) -> SourceEntry | None:
    """Run the exchange-admission gate against one swarm candidate and build
    the matching flow entry."""
    config = world.config
    source = world.peers[src]
    friend = src in peer.buddies

    if source.is_seeder:
        return _make_holder_entry(
            world, d, src, item, kind=TransferKind.RECIPROCAL, paid=False, friend=friend
        )

    src_dl = -1
    for candidate_dl in (world.peer_user_dl[src], world.peer_prefetch_dl[src],
                         world.peer_assist_dl[src]):
        if candidate_dl >= 0 and int(world.dl_item[candidate_dl]) == item.item_id:
            if world.dl_bytes[candidate_dl] > world.dl_bytes[d]:
                src_dl = candidate_dl
            break

    decision = select_exchange(peer, source, world.ledger, item, config.buddy_help)
    if decision is ExchangeDecision.REFUSE:
        return None
    if decision is ExchangeDecision.FREE_BUDDY:
        kind, paid = TransferKind.BUDDY, False
    elif decision is ExchangeDecision.RECIPROCAL:
        kind, paid = TransferKind.RECIPROCAL, False
    else:
        kind, paid = TransferKind.CREDIT, True

    if src_dl >= 0:
        if paid and not world.ledger.can_spend(peer.peer_id, 1):
            return None
        return world._new_entry(
            d, src, kind, paid=paid, friend=friend,
            avail_mode=AVAIL_TRACK, avail_ref=src_dl,
        )
    return _make_holder_entry(world, d, src, item, kind=kind, paid=paid, friend=friend)


# -- phase 5: prefetch -------------------------------------------------------


def _phase_prefetch(world: World) -> None:
    config = world.config
    active_prefetchers = sum(1 for d in world.active_ids if world.dl_kind[d] == DL_PREFETCH)
    cap = config.prefetch_cap if config.prefetch_cap > 0 else None
    step = world.clock.now
    for p in range(world.graph.node_count):
        if p % PREFETCH_EVERY != step % PREFETCH_EVERY:
            continue
        if cap is not None and active_prefetchers >= cap:
            return
        peer = world.peers[p]
        if (
            peer.is_seeder
            or world.peer_user_dl[p] >= 0
            or world.peer_prefetch_dl[p] >= 0
            or world.peer_assist_dl[p] >= 0
            or config.cache_capacity <= 0
        ):
            continue
        item_id = _pick_prefetch_item(world, p)
        if item_id is None:
            continue
        held = world.held_bytes(p, item_id)
        d = world._new_download(p, item_id, kind=DL_PREFETCH, start_bytes=held)
        world.peer_prefetch_dl[p] = d
        _resolve_sources(world, d)
        if not world.dl_sources[d]:
            world._drop_download(d)
            continue
        active_prefetchers += 1


def _pick_prefetch_item(world: World, peer_id: int) -> int | None:
    """Vectorized equivalent of the demand-prediction ranking, restricted to
    items some buddy can provide and that would survive cache insertion
    (fetching something the eviction policy immediately bounces would burn
    buddy bandwidth in an endless loop)."""
    peer = world.peers[peer_id]
    buddies = sorted(peer.buddies)
    config = world.config
    own = world.profile_matrix[peer_id]
    if buddies:
        buddy_mean = world.profile_matrix[buddies].mean(axis=0)
    else:
        buddy_mean = np.zeros_like(own)
    scores = (
        config.demand_w_self * own[world.item_category]
        + config.demand_w_buddy * buddy_mean[world.item_category]
    )
    cache_full = len(peer.cache) >= config.cache_capacity
    floor = math.inf
    if cache_full:
        stored = world.cache_scores[peer_id]
        victims = [i for i in peer.cache if i not in peer.active_downloads]
        floor = min((stored.get(i, 0.0) for i in victims), default=math.inf)
    order = np.lexsort((np.arange(len(scores)), -scores))
    for item_idx in order:
        if scores[item_idx] <= 0:
            break
        item_id = int(item_idx)
        if item_id in peer.library or item_id in peer.active_downloads:
            continue
        item = world.catalog[item_id]
        if peer.cache.get(item_id, 0) == item.full_mask:
            continue
        if cache_full and item_id not in peer.cache:
            if world.interest_score(peer_id, item.category) <= floor:
                continue
        having = world.holders.get(item_id, ())
        if any(b in having or world.peers[b].is_seeder for b in buddies):
            return item_id
    return None


# -- phase 6: completions ----------------------------------------------------


def _phase_completions(world: World) -> None:
    finished = [
        d for d in sorted(world.active_ids)
        if world.dl_bytes[d] >= world.dl_size[d] - 0.5
    ]
    end_s = world.clock.now_s + world.step_s
    for d in finished:
        _finalize_download(world, d, end_s)


def _finalize_download(world: World, d: int, end_s: float) -> None:
    peer_id = int(world.dl_peer[d])
    item_id = int(world.dl_item[d])
    item = world.catalog[item_id]
    peer = world.peers[peer_id]
    dl_kind = int(world.dl_kind[d])
    requested_s = float(world.dl_requested[d])

    world.dl_bytes[d] = world.dl_size[d]

    # integer byte split: cache bytes absorb float rounding so the three
    # fields partition the exact item size
    friend_b = min(int(round(world.dl_friend_bytes[d])), item.size_bytes)
    nonfriend_b = min(int(round(world.dl_nonfriend_bytes[d])), item.size_bytes - friend_b)
    cache_b = item.size_bytes - friend_b - nonfriend_b

    world._drop_download(d)

    if dl_kind == DL_ASSIST:  # the helper banks the copy; no user record
        _cache_item(world, peer_id, item_id, item.full_mask)
        return

    if dl_kind == DL_PREFETCH:  # speculative results live in the cache
        world.records.append(
            DownloadRecord(peer_id, item_id, requested_s, end_s,
                           friend_b, nonfriend_b, cache_b, True)
        )
        _cache_item(world, peer_id, item_id, item.full_mask)
        return

    peer.cache.pop(item_id, None)
    world.cache_scores[peer_id].pop(item_id, None)
    peer.library.add(item_id)
    world.holders.setdefault(item_id, set()).add(peer_id)
    world.records.append(
        DownloadRecord(peer_id, item_id, requested_s, end_s,
                       friend_b, nonfriend_b, cache_b, False)
    )
    world.completed_user_downloads += 1
    _apply_feedback(world, peer_id, item.category)
    peer.idle_until = end_s + sample_wait(world.arrivals, world.rngs["arrivals"])

    # helpers assigned to this download stand down
    for helper_id in sorted(peer.helpers.pop(item_id, set())):
        assist_d = world.peer_assist_dl[helper_id]
        if assist_d >= 0 and int(world.dl_item[assist_d]) == item_id and (
            int(world.dl_assist_for[assist_d]) == peer_id
        ):
            _cancel_speculative(world, assist_d)


# ---------------------------------------------------------------------------
# invariant checking
# ---------------------------------------------------------------------------


def check_world_invariants(world: World) -> None:
    """Raise on any violated engine invariant; cheap enough after a run,
    too expensive for every step."""
    if world.cap_violations:
        raise SimulationInvariantError(
            f"{world.cap_violations} steps oversubscribed a link cap"
        )
    world.ledger.check_conservation()
    for peer_id, used in enumerate(world.upload_slots_used):
        if used < 0:
            raise SimulationInvariantError(f"peer {peer_id}: negative upload slot count")
    for peer in world.peers:
        for item_id, mask in peer.cache.items():
            if mask.bit_count() > world.catalog[item_id].piece_count:
                raise SimulationInvariantError(
                    f"peer {peer.peer_id} holds more pieces of item {item_id} than exist"
                )
