"""Directed kNN graphs, non-backtracking line graphs, and dependence pruning.

The line graph L(G) has one node per directed edge of G and one edge per
composable pair (i,j) -> (j,k) with i != k, i.e. walks may never
immediately reverse.  Because longer cycles can still route information
back to its origin, a boolean table tracks which source nodes each
line-graph feature depends on; line-graph edges that would close a cycle
are deactivated before each message-passing step.  This is what keeps the
feature h_ij independent of x_j for any number of steps.

Graphs and line graphs are immutable after construction except for the
line graph's active-edge mask and the tracking table, which only
``prune_and_update`` mutates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DirectedGraph:
    """Directed edges (src[e], dst[e]) over n nodes; no self loops."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    k: int | None = None  # kNN parameter; None for other constructions

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.intp)
        self.dst = np.asarray(self.dst, dtype=np.intp)
        if self.src.shape != self.dst.shape:
            raise ValueError("src/dst length mismatch")
        if np.any(self.src == self.dst):
            raise ValueError("self loops are prohibited")

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def _canonical_edge_order(n, src, dst):
    order = np.lexsort((dst, src))
    return src[order], dst[order]


def complete_graph(n: int) -> DirectedGraph:
    """All n(n-1) directed edges."""
    src, dst = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = src != dst
    return DirectedGraph(n=n, src=src[keep], dst=dst[keep])


def build_knn_graph(positions: np.ndarray, k: int) -> DirectedGraph:
    """Symmetrized k-nearest-neighbor graph with index tie-breaking.

    Node j receives a directed edge from each of its k nearest neighbors
    (Euclidean distance); ties are broken by the smaller node index so the
    construction is deterministic.  Afterwards every edge gains its
    reverse, so degrees may exceed k but never 2k.
    """
    x = np.asarray(positions, dtype=np.float64)
    n = x.shape[0]
    if not (1 <= k <= n - 1):
        raise ValueError(f"k={k} out of range for n={n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("positions must be finite")
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    # stable argsort on distance gives index tie-breaks for free
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dst = np.repeat(np.arange(n), k)
    src = nn.reshape(-1)
    pairs = set(zip(src.tolist(), dst.tolist()))
    pairs |= {(j, i) for (i, j) in pairs}
    arr = np.array(sorted(pairs), dtype=np.intp)
    return DirectedGraph(n=n, src=arr[:, 0], dst=arr[:, 1], k=k)


@dataclass
class LineGraph:
    """Non-backtracking line graph of a directed graph.

    Line node e is edge e of the base graph.  Triples are stored as
    parallel arrays over line-graph edges (a,b) -> (b,c):

    - ``t_from``: line-node id of the sending edge (a,b)
    - ``t_to``:   line-node id of the receiving edge (b,c)
    - ``t_tail``: node a (origin of the sender)
    - ``t_head``: node c (target of the receiver)

    ``active`` is the mutable pruning mask over triples.
    """

    graph: DirectedGraph
    t_from: np.ndarray
    t_to: np.ndarray
    t_tail: np.ndarray
    t_head: np.ndarray
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(self.t_from.shape[0], dtype=bool)

    @property
    def n_nodes(self) -> int:
        return self.graph.n_edges

    @property
    def n_triples(self) -> int:
        return int(self.t_from.size)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    def active_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.active
        return self.t_from[m], self.t_to[m]


def build_line_graph(g: DirectedGraph) -> LineGraph:
    """Enumerate all composable non-reversing edge pairs of ``g``.

    Vectorized: edges are grouped by source node, every in-edge (a,b) is
    paired with the whole out-edge block of b, and reversing pairs (c == a)
    are filtered out afterwards.
    """
    n_e = g.n_edges
    if n_e == 0:
        z = np.zeros(0, dtype=np.intp)
        return LineGraph(graph=g, t_from=z, t_to=z.copy(),
                         t_tail=z.copy(), t_head=z.copy())
    order = np.argsort(g.src, kind="stable")
    out_deg = np.bincount(g.src, minlength=g.n)
    block_start = np.concatenate([[0], np.cumsum(out_deg)])
    reps = out_deg[g.dst]
    t_from = np.repeat(np.arange(n_e, dtype=np.intp), reps)
    total = int(reps.sum())
    # position of each pair within its out-edge block
    row_start = np.concatenate([[0], np.cumsum(reps)])[:-1]
    within = np.arange(total) - np.repeat(row_start, reps)
    t_to = order[np.repeat(block_start[g.dst], reps) + within]
    keep = g.dst[t_to] != g.src[t_from]
    t_from, t_to = t_from[keep], t_to[keep]
    return LineGraph(graph=g, t_from=t_from, t_to=t_to,
                     t_tail=g.src[t_from].copy(), t_head=g.dst[t_to].copy())


@dataclass
class BacktrackArray:
    """Which base-graph nodes each line-graph feature depends on.

    Boolean matrix of shape (number of line nodes, n).  Entries only ever
    flip from 0 to 1, and the column of an edge's own target stays 0 at
    every step: that is the invariant pruning enforces.
    """

    table: np.ndarray
    step: int = 0

    def copy(self) -> "BacktrackArray":
        return BacktrackArray(table=self.table.copy(), step=self.step)


def init_backtracking(lg: LineGraph, pd: bool) -> BacktrackArray:
    """Initial dependence table.

    Plain mode: feature of edge (i,j) starts as an embedding of x_i, so
    only column i is set.  Pairwise-difference mode: the initial feature
    aggregates embeddings of x_k - x_i over in-neighbors k, so columns for
    all in-neighbors *and* i are set (the difference depends on both ends).
    """
    g = lg.graph
    table = np.zeros((lg.n_nodes, g.n), dtype=bool)
    if pd:
        table[lg.t_to, lg.t_tail] = True
        table[np.arange(g.n_edges), g.src] = True
    else:
        table[np.arange(g.n_edges), g.src] = True
    return BacktrackArray(table=table, step=0)


def prune_and_update(lg: LineGraph, bt: BacktrackArray) -> tuple[int, BacktrackArray]:
    """One pruning round: deactivate closing triples, then propagate.

    A triple (a,b) -> (b,c) is deactivated when the sender's feature
    already depends on x_c, because passing that message would make the
    receiver (b,c) depend on its own target.  The new table is the union
    of each receiver's old row with the rows of its remaining senders.
    Returns the number of triples removed this round.
    """
    close = lg.active & bt.table[lg.t_from, lg.t_head]
    removed = int(np.count_nonzero(close))
    lg.active &= ~close
    new = bt.table.copy()
    m = lg.active
    np.logical_or.at(new, lg.t_to[m], bt.table[lg.t_from[m]])
    bt.table = new
    bt.step += 1
    return removed, bt


def connectivity_profile(g: DirectedGraph, pd: bool, steps: int) -> np.ndarray:
    """Active line-graph edge count available to each message-passing step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    lg = build_line_graph(g)
    bt = init_backtracking(lg, pd)
    counts = np.empty(steps, dtype=np.intp)
    for t in range(steps):
        prune_and_update(lg, bt)
        counts[t] = lg.n_active
    return counts


@dataclass
class HeadPartition:
    """Length-sorted chunks of the complete edge set, one graph per head.

    ``chunk_edges`` keeps each head's slice of the sorted edge list before
    symmetrization; in non-overlapping mode these chunks partition the
    complete edge set exactly.
    """

    heads: list[DirectedGraph]
    n_heads: int
    overlap: int
    length_ranges: list[tuple[float, float]]
    chunk_edges: list[np.ndarray] = None


def partition_multihead(positions: np.ndarray, n_heads: int,
                        overlap: int = 0) -> HeadPartition:
    """Split the complete directed edge set into heads by edge length.

    Edges are sorted by Euclidean length (ties by edge index).  With no
    overlap the sorted list is divided into ``n_heads`` consecutive chunks
    whose sizes differ by at most one, the longer chunks coming first.
    With overlap I, every chunk has ~#E/(n_heads - I) edges and the chunk
    centers are spaced evenly over the sorted list, so consecutive heads
    share edges.  Each head is symmetrized after chunking.
    """
    x = np.asarray(positions, dtype=np.float64)
    n = x.shape[0]
    if n_heads < 1:
        raise ValueError("need at least one head")
    if not (0 <= overlap < n_heads):
        raise ValueError("overlap must satisfy 0 <= I < H")
    fc = complete_graph(n)
    lengths = np.linalg.norm(x[fc.src] - x[fc.dst], axis=1)
    order = np.argsort(lengths, kind="stable")
    src_s, dst_s = fc.src[order], fc.dst[order]
    len_s = lengths[order]
    n_e = fc.n_edges

    windows: list[tuple[int, int]] = []
    if overlap == 0:
        base, rem = divmod(n_e, n_heads)
        lo = 0
        for q in range(n_heads):
            size = base + (1 if q < rem else 0)
            windows.append((lo, lo + size))
            lo += size
    else:
        base, rem = divmod(n_e, n_heads - overlap)
        sizes = [base + (1 if q < rem else 0) for q in range(n_heads)]
        sizes = [min(s, n_e) for s in sizes]
        for q in range(n_heads):
            if n_heads == 1:
                start = 0
            else:
                start = int(round(q * (n_e - sizes[q]) / (n_heads - 1)))
            windows.append((start, start + sizes[q]))

    heads, ranges, chunks = [], [], []
    for lo, hi in windows:
        s, d = src_s[lo:hi], dst_s[lo:hi]
        chunks.append(np.stack([s, d], axis=1))
        pairs = set(zip(s.tolist(), d.tolist()))
        pairs |= {(j, i) for (i, j) in pairs}
        arr = np.array(sorted(pairs), dtype=np.intp)
        heads.append(DirectedGraph(n=n, src=arr[:, 0], dst=arr[:, 1]))
        ranges.append((float(len_s[lo]), float(len_s[hi - 1])))
    return HeadPartition(heads=heads, n_heads=n_heads, overlap=overlap,
                         length_ranges=ranges, chunk_edges=chunks)
