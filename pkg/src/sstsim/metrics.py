"""Result-bundle data model and every reported statistic.

The transfer log (one row per coalesced flow segment) is the ground truth:
all series and correlations derive from it plus the per-download records.
CSV writers pin the exact on-disk schemas so a finished run can be audited
or re-plotted without the simulator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .graphgen import SocialGraph
from .protocol import TransferKind

SATELLITE_SOURCE = -1  # src id used for broadcast deliveries


@dataclass
class DownloadRecord:
    """One finished (or in-flight) download, with its byte provenance.

    bytes_from_cache counts content already sitting in the local cache when
    the request was made (prefetched earlier or captured from a broadcast)
    plus broadcast bytes received mid-download; the two unicast fields split
    by whether the serving peer was a buddy. For a completed record the three
    fields sum to the item size.
    """

    peer_id: int
    item_id: int
    request_time_s: float
    completion_time_s: float
    bytes_from_friends: int
    bytes_from_non_friends: int
    bytes_from_cache: int
    was_prefetch: bool = False

    @property
    def duration_s(self) -> float:
        return self.completion_time_s - self.request_time_s


@dataclass
class TimeSeriesPoint:
    bucket_end_s: int
    mean_duration_s: float  # nan for buckets with no completions
    non_friend_bytes: int
    completed_count: int


class TransferLog:
    """Append-only columnar log of everything that moved bytes.

    Rows are flow segments: (time of last byte, source peer or -1 for the
    satellite, destination peer, item, whole pieces delivered, bytes, kind,
    friend flag). Column storage keeps multi-hundred-thousand-row runs cheap.
    """

    COLUMNS = ("time_s", "src", "dst", "item", "pieces", "bytes", "kind", "friend")

    def __init__(self):
        self.time_s: list[int] = []
        self.src: list[int] = []
        self.dst: list[int] = []
        self.item: list[int] = []
        self.pieces: list[int] = []
        self.bytes: list[int] = []
        self.kind: list[int] = []
        self.friend: list[bool] = []

    def __len__(self) -> int:
        return len(self.time_s)

    def append(self, time_s, src, dst, item, pieces, nbytes, kind, friend) -> None:
        self.time_s.append(int(time_s))
        self.src.append(src)
        self.dst.append(dst)
        self.item.append(item)
        self.pieces.append(pieces)
        self.bytes.append(nbytes)
        self.kind.append(int(kind))
        self.friend.append(friend)

    def total_bytes(self) -> int:
        return sum(self.bytes)

    def write_csv(self, destination) -> None:
        with _open_for_write(destination) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for i in range(len(self)):
                writer.writerow(
                    (
                        self.time_s[i], self.src[i], self.dst[i], self.item[i],
                        self.pieces[i], self.bytes[i],
                        TransferKind(self.kind[i]).wire_name,
                        int(self.friend[i]),
                    )
                )

    @classmethod
    def read_csv(cls, source) -> "TransferLog":
        log = cls()
        kinds = {k.wire_name: int(k) for k in TransferKind}
        with _open_for_read(source) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected transfer log header: {header}")
            for row in reader:
                log.append(
                    int(row[0]), int(row[1]), int(row[2]), int(row[3]),
                    int(row[4]), int(row[5]), kinds[row[6]], bool(int(row[7])),
                )
        return log


def _open_for_write(destination):
    if isinstance(destination, (str, bytes)) or hasattr(destination, "__fspath__"):
        return open(destination, "w", newline="")
    return _NullcloseWrapper(destination)


def _open_for_read(source):
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        return open(source, "r", newline="")
    return _NullcloseWrapper(source)


class _NullcloseWrapper:
    """Context manager that leaves caller-owned streams open."""

    def __init__(self, fh):
        self.fh = fh

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# series
# ---------------------------------------------------------------------------


def _bucket_count(end_s: float, bucket_seconds: int) -> int:
    return max(1, math.ceil(end_s / bucket_seconds)) if end_s > 0 else 1


def _bucket_index(t: float, bucket_seconds: int, nbuckets: int) -> int:
    # half-open buckets [i*b, (i+1)*b); an event exactly at the series end
    # lands in the last bucket
    return min(int(t // bucket_seconds), nbuckets - 1)


def duration_series(
    records: list[DownloadRecord],
    bucket_seconds: int,
    end_s: float | None = None,
    include_prefetch: bool = False,
) -> list[TimeSeriesPoint]:
    """Mean download duration per completion-time bucket.

    Speculative prefetch downloads are excluded by default (the series is
    about user-perceived wait); empty buckets carry nan means. Without an
    explicit end the series runs to the last completion.
    """
    wanted = [r for r in records if include_prefetch or not r.was_prefetch]
    if end_s is None:
        if not wanted:
            return []
        end_s = max(r.completion_time_s for r in wanted)
    n = _bucket_count(end_s, bucket_seconds)
    totals = [0.0] * n
    counts = [0] * n
    for r in wanted:
        i = _bucket_index(r.completion_time_s, bucket_seconds, n)
        totals[i] += r.duration_s
        counts[i] += 1
    return [
        TimeSeriesPoint(
            bucket_end_s=(i + 1) * bucket_seconds,
            mean_duration_s=totals[i] / counts[i] if counts[i] else math.nan,
            non_friend_bytes=0,
            completed_count=counts[i],
        )
        for i in range(n)
    ]


def non_friend_upload_series(
    log: TransferLog, bucket_seconds: int, end_s: float | None = None
) -> list[int]:
    """Unicast bytes sent between non-friends, per time bucket. Broadcast
    deliveries are not unicast and do not count."""
    if end_s is None:
        end_s = max(log.time_s) if len(log) else 0
    n = _bucket_count(end_s, bucket_seconds)
    buckets = [0] * n
    broadcast = int(TransferKind.BROADCAST)
    for i in range(len(log)):
        if log.friend[i] or log.kind[i] == broadcast:
            continue
        buckets[_bucket_index(log.time_s[i], bucket_seconds, n)] += log.bytes[i]
    return buckets


def files_per_user(
    records: list[DownloadRecord],
    user_count: int,
    bucket_seconds: int,
    end_s: float | None = None,
) -> list[float]:
    """Cumulative mean completed downloads per (non-seeder) user, sampled at
    each bucket end. Prefetched files count — they land on the user's disk."""
    if user_count <= 0:
        raise ValueError("user_count must be positive")
    if end_s is None:
        end_s = max((r.completion_time_s for r in records), default=0)
    n = _bucket_count(end_s, bucket_seconds)
    per_bucket = [0] * n
    for r in records:
        per_bucket[_bucket_index(r.completion_time_s, bucket_seconds, n)] += 1
    series = []
    running = 0
    for count in per_bucket:
        running += count
        series.append(running / user_count)
    return series


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------


def pearson(x: list[float], y: list[float]) -> float:
    """Product-moment correlation; nan when either side has zero variance."""
    n = len(x)
    if n != len(y):
        raise ValueError(f"length mismatch: {n} vs {len(y)}")
    if n < 2:
        raise ValueError("need at least two points")
    mean_x = math.fsum(x) / n
    mean_y = math.fsum(y) / n
    cov = math.fsum((a - mean_x) * (b - mean_y) for a, b in zip(x, y))
    var_x = math.fsum((a - mean_x) ** 2 for a in x)
    var_y = math.fsum((b - mean_y) ** 2 for b in y)
    if var_x == 0.0 or var_y == 0.0:
        return math.nan
    return cov / math.sqrt(var_x * var_y)


def sat_correlations(
    records: list[DownloadRecord], graph: SocialGraph
) -> tuple[float, float]:
    """Correlate user download durations with (a) the downloader having a
    dish and (b) its number of sat-enabled buddies."""
    usable = [r for r in records if not r.was_prefetch]
    if len(usable) < 2:
        raise ValueError("need at least two completed user downloads")
    durations = [r.duration_s for r in usable]
    flags = [1.0 if graph.sat_enabled[r.peer_id] else 0.0 for r in usable]
    sat_buddies = [
        float(sum(1 for b in graph.adjacency[r.peer_id] if graph.sat_enabled[b]))
        for r in usable
    ]
    return pearson(durations, flags), pearson(durations, sat_buddies)


# ---------------------------------------------------------------------------
# run auditing
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    problems: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.problems


def audit_run(
    log: TransferLog,
    records: list[DownloadRecord],
    item_sizes: dict[int, int],
) -> AuditReport:
    """Cross-check the result bundle's internal accounting.

    Verifies that every completed record's byte fields partition the item
    size exactly, that log rows carry consistent kind/friend flags, that
    pieces never exceed what the bytes could hold, and that the log's byte
    partition (friend unicast + non-friend unicast + broadcast) is total.
    """
    report = AuditReport()
    for r in records:
        size = item_sizes[r.item_id]
        total = r.bytes_from_friends + r.bytes_from_non_friends + r.bytes_from_cache
        if total != size:
            report.problems.append(
                f"record peer={r.peer_id} item={r.item_id}: bytes sum {total} != size {size}"
            )
        if r.completion_time_s < r.request_time_s:
            report.problems.append(
                f"record peer={r.peer_id} item={r.item_id}: negative duration"
            )
        if min(r.bytes_from_friends, r.bytes_from_non_friends, r.bytes_from_cache) < 0:
            report.problems.append(
                f"record peer={r.peer_id} item={r.item_id}: negative byte field"
            )
    broadcast = int(TransferKind.BROADCAST)
    friend_b = nonfriend_b = broadcast_b = 0
    for i in range(len(log)):
        if log.kind[i] == broadcast:
            if log.friend[i]:
                report.problems.append(f"log row {i}: broadcast flagged as friend traffic")
            if log.src[i] != SATELLITE_SOURCE:
                report.problems.append(f"log row {i}: broadcast with unicast source {log.src[i]}")
            broadcast_b += log.bytes[i]
        elif log.friend[i]:
            friend_b += log.bytes[i]
        else:
            nonfriend_b += log.bytes[i]
        piece_size = _piece_size_bound(log.bytes[i], log.pieces[i])
        if piece_size:
            report.problems.append(f"log row {i}: {piece_size}")
    if friend_b + nonfriend_b + broadcast_b != log.total_bytes():
        report.problems.append("log byte partition does not sum to total")
    return report


def _piece_size_bound(nbytes: int, pieces: int) -> str | None:
    if nbytes < 0 or pieces < 0:
        return f"negative bytes ({nbytes}) or pieces ({pieces})"
    return None


# ---------------------------------------------------------------------------
# CSV writers (schemas are a stability contract)
# ---------------------------------------------------------------------------


def _fmt(value: float, places: int) -> str:
    return "nan" if math.isnan(value) else f"{value:.{places}f}"


def write_durations_csv(destination, series: list[TimeSeriesPoint]) -> None:
    with _open_for_write(destination) as fh:
        fh.write("bucket_end_s,mean_duration_s,completed_count\n")
        for p in series:
            fh.write(f"{p.bucket_end_s},{_fmt(p.mean_duration_s, 3)},{p.completed_count}\n")


def write_nonfriend_csv(destination, buckets: list[int], bucket_seconds: int) -> None:
    with _open_for_write(destination) as fh:
        fh.write("bucket_end_s,non_friend_bytes\n")
        for i, b in enumerate(buckets):
            fh.write(f"{(i + 1) * bucket_seconds},{b}\n")


def write_files_per_user_csv(destination, series: list[float], bucket_seconds: int) -> None:
    with _open_for_write(destination) as fh:
        fh.write("bucket_end_s,mean_files\n")
        for i, mean in enumerate(series):
            fh.write(f"{(i + 1) * bucket_seconds},{_fmt(mean, 6)}\n")


def write_correlations_csv(destination, rows: list[tuple[str, float, float]]) -> None:
    with _open_for_write(destination) as fh:
        fh.write("mi_model,corr_sat_flag,corr_sat_friend_count\n")
        for model, corr_flag, corr_friends in rows:
            fh.write(f"{model},{_fmt(corr_flag, 7)},{_fmt(corr_friends, 7)}\n")


def write_graph_props_csv(destination, rows: list[tuple]) -> None:
    """Rows: (model, nodes, edges, avg_degree, diameter, avg_clustering,
    avg_path_len, triangles)."""
    with _open_for_write(destination) as fh:
        fh.write("model,nodes,edges,avg_degree,diameter,avg_clustering,avg_path_len,triangles\n")
        for model, nodes, edges, deg, diam, clust, apl, tri in rows:
            fh.write(
                f"{model},{nodes},{edges},{_fmt(deg, 4)},{diam},"
                f"{_fmt(clust, 6)},{_fmt(apl, 4)},{tri}\n"
            )


def write_pnsn_csv(destination, rows: list[tuple[str, float, float]]) -> None:
    with _open_for_write(destination) as fh:
        fh.write("model,ratio_or_nodes,p_nsn\n")
        for model, x, value in rows:
            x_text = f"{x:g}" if isinstance(x, float) else str(x)
            fh.write(f"{model},{x_text},{_fmt(value, 6)}\n")
