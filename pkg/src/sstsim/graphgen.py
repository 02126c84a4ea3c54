"""Social graph models and structural analytics.

Two growth models are provided: preferential attachment (scale-free, low
clustering) and a triadic-closure model that connects each newcomer to a few
random contacts plus neighbors of those contacts (high clustering, no extreme
hubs). On top of either graph, a configurable fraction of nodes is flagged as
satellite-enabled, and `p_nsn` measures how likely a node is to have no
sat-enabled neighbor at all.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .errors import ConfigError, EdgeListParseError
from .rng import as_rng


@dataclass
class SocialGraph:
    """Undirected simple graph plus a per-node satellite-reception flag.

    `adjacency[i]` is the buddy-list of node i. Invariants: symmetry, no
    self-loops, all neighbor ids < node_count.
    """

    node_count: int
    adjacency: list[set[int]]
    sat_enabled: list[bool]

    @classmethod
    def empty(cls, n: int) -> "SocialGraph":
        return cls(n, [set() for _ in range(n)], [False] * n)

    def add_edge(self, u: int, v: int) -> None:
        if u == v:
            raise ValueError(f"self-loop at node {u}")
        if not (0 <= u < self.node_count and 0 <= v < self.node_count):
            raise ValueError(f"edge ({u}, {v}) out of range for n={self.node_count}")
        self.adjacency[u].add(v)
        self.adjacency[v].add(u)

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adjacency[u]

    def degree(self, u: int) -> int:
        return len(self.adjacency[u])

    def edge_count(self) -> int:
        return sum(len(nbrs) for nbrs in self.adjacency) // 2

    def edges(self):
        """Yield each undirected edge once, as (u, v) with u < v, sorted."""
        for u in range(self.node_count):
            for v in sorted(self.adjacency[u]):
                if u < v:
                    yield (u, v)

    def sat_count(self) -> int:
        return sum(self.sat_enabled)

    def validate(self) -> None:
        """Raise ValueError on any structural invariant violation."""
        if len(self.adjacency) != self.node_count or len(self.sat_enabled) != self.node_count:
            raise ValueError("adjacency/flag length mismatch")
        for u, nbrs in enumerate(self.adjacency):
            if u in nbrs:
                raise ValueError(f"self-loop at node {u}")
            for v in nbrs:
                if not 0 <= v < self.node_count:
                    raise ValueError(f"neighbor id {v} out of range")
                if u not in self.adjacency[v]:
                    raise ValueError(f"asymmetric edge ({u}, {v})")


@dataclass
class GraphProperties:
    """Structural summary of one graph (path metrics over the largest
    component when the graph is disconnected, with the flag set)."""

    edge_count: int
    average_degree: float
    diameter: int
    average_clustering_coefficient: float
    average_path_length: float
    total_triangles: int
    largest_component_only: bool = False


@dataclass
class BaParams:
    """Preferential-attachment parameters: m0 initial ring nodes, m edges per newcomer."""

    m0: int = 10
    m: int = 5


@dataclass
class ToParams:
    """Triadic-closure growth parameters.

    r_choices maps initial-contact counts to probabilities; each initial
    contact then contributes a number of its own neighbors drawn geometrically
    with mean p_mean, truncated at secondary_cap (so zero-contribution
    contacts are common — which keeps a realistic low-degree population
    alive — while no single contact floods the newcomer with one
    neighborhood). Defaults are calibrated at n=10,000 to average degree
    ~10.1 with mean local clustering ~0.50; mostly-single initial contacts
    keep each newcomer's links inside one neighborhood, which is what drives
    the clustering that high.
    """

    r_choices: dict[int, float] = field(default_factory=lambda: {1: 0.7, 2: 0.3})
    p_mean: float = 4.2
    secondary_cap: int = 8


def generate_ba(n: int, params: BaParams, seed: int | random.Random) -> SocialGraph:
    """Grow a scale-free graph by degree-proportional attachment.

    Starts from m0 nodes wired in a ring (every initial node has degree >= 2,
    so attachment probabilities are well defined) and adds nodes one by one,
    each connecting to m distinct existing nodes chosen with probability
    proportional to current degree, without replacement.
    """
    problems = []
    if params.m0 < 2:
        problems.append(f"m0 must be >= 2, got {params.m0}")
    if not 1 <= params.m <= params.m0:
        problems.append(f"m must satisfy 1 <= m <= m0, got m={params.m}, m0={params.m0}")
    if n < params.m0:
        problems.append(f"n must be >= m0, got n={n}, m0={params.m0}")
    if problems:
        raise ConfigError(problems)

    rng = as_rng(seed)
    graph = SocialGraph.empty(n)
    m0, m = params.m0, params.m

    # Initial ring; m0 == 2 degenerates to a single edge.
    if m0 == 2:
        graph.add_edge(0, 1)
    else:
        for i in range(m0):
            graph.add_edge(i, (i + 1) % m0)

    # One entry per unit of degree; uniform draws from it are degree-proportional.
    repeated: list[int] = []
    for u in range(m0):
        repeated.extend([u] * len(graph.adjacency[u]))

    for v in range(m0, n):
        targets: set[int] = set()
        while len(targets) < m:
            candidate = repeated[rng.randrange(len(repeated))]
            # Rejection keeps the draw degree-proportional among the remaining
            # candidates, i.e. without replacement with renormalization.
            if candidate not in targets:
                targets.add(candidate)
        for t in sorted(targets):
            graph.add_edge(v, t)
            repeated.append(t)
        repeated.extend([v] * m)

    return graph


def _secondary_count(p_mean: float, rng: random.Random) -> int:
    """Geometric draw on {0, 1, 2, ...} with exact mean p_mean.

    The fat zero end matters: newcomers whose contacts contribute nothing
    start at degree r, and that low-degree population is what keeps the
    model's degree distribution (and satellite reachability) realistic.
    """
    if p_mean <= 0:
        return 0
    success = 1.0 / (1.0 + p_mean)
    u = rng.random()
    return int(math.log1p(-u) / math.log1p(-success))


def generate_toivonen(n: int, params: ToParams, seed: int | random.Random) -> SocialGraph:
    """Grow a high-clustering social graph by neighborhood attachment.

    Each new node connects to r randomly chosen existing nodes (r drawn from
    r_choices) and, for each of those initial contacts, to some of the
    contact's own neighbors (count drawn with mean p_mean, clipped to the
    distinct neighbors actually available). The seed graph is a small clique.
    """
    problems = []
    if not params.r_choices:
        problems.append("r_choices must be a nonempty distribution (graph seed would be empty)")
    else:
        if any(r < 1 for r in params.r_choices):
            problems.append("initial-contact counts must be >= 1")
        if any(p < 0 for p in params.r_choices.values()) or sum(params.r_choices.values()) <= 0:
            problems.append("r_choices probabilities must be non-negative and sum > 0")
    if params.p_mean < 0:
        problems.append(f"p_mean must be >= 0, got {params.p_mean}")
    if params.secondary_cap < 0:
        problems.append(f"secondary_cap must be >= 0, got {params.secondary_cap}")
    if not problems:
        max_r = max(params.r_choices)
        if n < 2 + max_r:
            problems.append(f"n must be >= 2 + max initial contacts ({2 + max_r}), got {n}")
    if problems:
        raise ConfigError(problems)

    rng = as_rng(seed)
    graph = SocialGraph.empty(n)
    max_r = max(params.r_choices)
    counts = sorted(params.r_choices)
    weights = [params.r_choices[r] for r in counts]

    seed_size = max_r + 1
    for u in range(seed_size):
        for v in range(u + 1, seed_size):
            graph.add_edge(u, v)

    for v in range(seed_size, n):
        r = rng.choices(counts, weights=weights, k=1)[0]
        initials = rng.sample(range(v), min(r, v))
        new_neighbors = set(initials)
        for contact in initials:
            want = min(_secondary_count(params.p_mean, rng), params.secondary_cap)
            if want == 0:
                continue
            candidates = sorted(graph.adjacency[contact] - new_neighbors - {v})
            take = min(want, len(candidates))
            if take:
                new_neighbors.update(rng.sample(candidates, take))
        for t in sorted(new_neighbors):
            graph.add_edge(v, t)

    return graph


def assign_sat_peers(graph: SocialGraph, ratio: float, seed: int | random.Random) -> SocialGraph:
    """Return a graph with exactly round(ratio*n) nodes flagged sat-enabled,
    chosen uniformly without replacement.

    The same seed yields nested flag sets across ratios (the selection is a
    prefix of one shuffled permutation), which makes paired-ratio sweeps
    monotone by construction. Adjacency is shared with the input graph.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"sat ratio must be in [0, 1], got {ratio}")
    rng = as_rng(seed)
    n = graph.node_count
    k = int(math.floor(ratio * n + 0.5))
    order = list(range(n))
    rng.shuffle(order)
    flags = [False] * n
    for node in order[:k]:
        flags[node] = True
    return SocialGraph(n, graph.adjacency, flags)


def p_nsn(graph: SocialGraph) -> float:
    """Fraction of all nodes whose buddy-list contains no sat-enabled node.

    A node's own flag is ignored; the denominator is every node, so ratio=1
    on a graph without isolated nodes gives exactly 0.
    """
    if graph.node_count == 0:
        raise ValueError("p_nsn undefined on the empty graph")
    flags = graph.sat_enabled
    without = sum(1 for nbrs in graph.adjacency if not any(flags[v] for v in nbrs))
    return without / graph.node_count


def _clustering_and_triangles(graph: SocialGraph) -> tuple[float, int]:
    """Mean local clustering (degree<2 nodes contribute 0) and total triangle
    count, via neighbor-set intersections."""
    n = graph.node_count
    adj = graph.adjacency
    closed_pair_sum = 0  # sum over nodes of closed neighbor pairs, x3 per triangle
    coeff_total = 0.0
    for u in range(n):
        d = len(adj[u])
        if d < 2:
            continue
        paths = 0
        for v in adj[u]:
            paths += len(adj[u] & adj[v])
        closed = paths // 2
        closed_pair_sum += closed
        coeff_total += closed / (d * (d - 1) / 2)
    return (coeff_total / n if n else 0.0), closed_pair_sum // 3


def _to_sparse(graph: SocialGraph) -> csr_matrix:
    n = graph.node_count
    rows, cols = [], []
    for u, v in graph.edges():
        rows.extend((u, v))
        cols.extend((v, u))
    data = np.ones(len(rows), dtype=np.int8)
    return csr_matrix((data, (rows, cols)), shape=(n, n))


def graph_properties(graph: SocialGraph, batch_size: int = 512) -> GraphProperties:
    """Compute the structural summary: edges, mean degree, diameter, mean
    local clustering, average path length, triangle count.

    Path metrics come from breadth-first search out of every node (run in
    batches through scipy's compiled routines). On a disconnected graph they
    are computed over the largest component and the result is flagged.
    """
    n = graph.node_count
    if n == 0:
        raise ValueError("graph_properties undefined on the empty graph")
    e = graph.edge_count()
    avg_degree = 2.0 * e / n
    clustering, triangles = _clustering_and_triangles(graph)

    if n == 1:
        return GraphProperties(e, avg_degree, 0, clustering, 0.0, triangles)

    sparse = _to_sparse(graph)
    n_comp, labels = connected_components(sparse, directed=False)
    flagged = n_comp > 1
    if flagged:
        largest = np.argmax(np.bincount(labels))
        members = np.flatnonzero(labels == largest)
        sparse = sparse[members][:, members]
    nc = sparse.shape[0]

    if nc == 1:
        return GraphProperties(e, avg_degree, 0, clustering, 0.0, triangles, flagged)

    diameter = 0
    dist_total = 0.0
    for start in range(0, nc, batch_size):
        idx = np.arange(start, min(start + batch_size, nc))
        dists = shortest_path(sparse, method="D", directed=False, unweighted=True, indices=idx)
        diameter = max(diameter, int(dists.max()))
        dist_total += float(dists.sum())
    avg_path = dist_total / (nc * (nc - 1))
    return GraphProperties(e, avg_degree, diameter, clustering, avg_path, triangles, flagged)


def export_edge_list(graph: SocialGraph, destination) -> None:
    """Write the graph as newline-delimited text: a `# nodes=<n>` header, one
    `u v` line per edge, then `# sat` and the flagged node ids."""
    own = isinstance(destination, (str, bytes)) or hasattr(destination, "__fspath__")
    fh = open(destination, "w", newline="\n") if own else destination
    try:
        fh.write(f"# nodes={graph.node_count}\n")
        for u, v in graph.edges():
            fh.write(f"{u} {v}\n")
        fh.write("# sat\n")
        for node, flag in enumerate(graph.sat_enabled):
            if flag:
                fh.write(f"{node}\n")
    finally:
        if own:
            fh.close()


def import_edge_list(source) -> SocialGraph:
    """Parse a file produced by export_edge_list. Malformed input raises
    EdgeListParseError with the offending line number."""
    own = isinstance(source, (str, bytes)) or hasattr(source, "__fspath__")
    fh = open(source, "r") if own else source
    try:
        lines = fh.read().splitlines()
    finally:
        if own:
            fh.close()

    if not lines or not lines[0].startswith("# nodes="):
        raise EdgeListParseError(1, "expected header '# nodes=<n>'")
    try:
        n = int(lines[0][len("# nodes="):])
    except ValueError:
        raise EdgeListParseError(1, f"bad node count in header: {lines[0]!r}") from None
    if n < 0:
        raise EdgeListParseError(1, f"negative node count {n}")

    graph = SocialGraph.empty(n)
    in_sat = False
    for lineno, line in enumerate(lines[1:], start=2):
        text = line.strip()
        if not text:
            continue
        if text == "# sat":
            if in_sat:
                raise EdgeListParseError(lineno, "duplicate '# sat' section")
            in_sat = True
            continue
        if in_sat:
            try:
                node = int(text)
            except ValueError:
                raise EdgeListParseError(lineno, f"bad sat node id {text!r}") from None
            if not 0 <= node < n:
                raise EdgeListParseError(lineno, f"sat node id {node} out of range")
            if graph.sat_enabled[node]:
                raise EdgeListParseError(lineno, f"duplicate sat node id {node}")
            graph.sat_enabled[node] = True
        else:
            parts = text.split()
            if len(parts) != 2:
                raise EdgeListParseError(lineno, f"expected 'u v', got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise EdgeListParseError(lineno, f"non-integer edge endpoints {text!r}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise EdgeListParseError(lineno, f"edge ({u}, {v}) out of range")
            if u == v:
                raise EdgeListParseError(lineno, f"self-loop at node {u}")
            if graph.has_edge(u, v):
                raise EdgeListParseError(lineno, f"duplicate edge ({u}, {v})")
            graph.add_edge(u, v)
    return graph
