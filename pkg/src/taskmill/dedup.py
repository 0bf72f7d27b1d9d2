"""Near-duplicate detection over instruction texts.

Embeds every instruction, flags pairs whose cosine similarity clears a
cutoff (0.90 by default), asks a verifier model whether each flagged pair
is functionally the same task, merges confirmed pairs with union-find,
and keeps one representative per cluster. Two index modes: an exact
blockwise scan (default up to 50k items, oracle-exact) and a navigable
small-world graph for larger corpora.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

import numpy as np

from .gateway import (
    Gateway,
    Role,
    TransportError,
    load_prompt,
    parse_verifier_reply,
    render_prompt,
)
from .jsonl import JsonlReader, dumps, write_jsonl
from .model import DupCluster, Instruction, Quadruplet, normalize

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.90
EXACT_MODE_MAX = 50_000
DEFAULT_VERIFY_BUDGET = 10_000

FlaggedPair = tuple[str, str, float]


class IndexMode(str, Enum):
    EXACT = "exact"
    APPROX = "approx"


@dataclass(frozen=True)
class DedupConfig:
    threshold: float = DEFAULT_THRESHOLD
    mode: Optional[IndexMode] = None  # None picks by corpus size
    verify_budget: int = DEFAULT_VERIFY_BUDGET
    graph_links: int = 12
    search_width: int = 48

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if self.verify_budget < 0:
            raise ValueError("verify_budget must be >= 0")
        if self.graph_links < 1 or self.search_width < self.graph_links:
            raise ValueError("search_width must be >= graph_links >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "DedupConfig":
        mode = raw.get("mode")
        return cls(
            threshold=float(raw.get("threshold", DEFAULT_THRESHOLD)),
            mode=IndexMode(mode) if mode is not None else None,
            verify_budget=int(raw.get("verify_budget", DEFAULT_VERIFY_BUDGET)),
            graph_links=int(raw.get("graph_links", 12)),
            search_width=int(raw.get("search_width", 48)),
        )


class _NswGraph:
    """Single-layer navigable small-world graph over unit vectors.

    Nodes are inserted one at a time and linked to their nearest already
    inserted neighbors, so the graph stays connected from node 0 and a
    greedy beam search recovers close neighbors with high recall.
    """

    def __init__(self, matrix: np.ndarray, links: int, width: int) -> None:
        self.matrix = matrix
        self.links = links
        self.width = width
        self.adj: list[list[int]] = []
        for i in range(matrix.shape[0]):
            self._insert(i)

    def _insert(self, i: int) -> None:
        if i == 0:
            self.adj.append([])
            return
        found = self._search(self.matrix[i], self.width, limit=i)
        self.adj.append([])
        for _, j in found[: self.links]:
            self.adj[i].append(j)
            self.adj[j].append(i)
            # cap degree so search stays cheap; drop the weakest link
            if len(self.adj[j]) > 2 * self.links:
                sims = self.matrix[self.adj[j]] @ self.matrix[j]
                self.adj[j].pop(int(np.argmin(sims)))

    def _search(
        self, query: np.ndarray, width: int, limit: Optional[int] = None
    ) -> list[tuple[float, int]]:
        """Beam search from node 0; returns (cosine, node) sorted descending."""
        n = len(self.adj) if limit is None else limit
        if n == 0:
            return []
        entry_sim = float(self.matrix[0] @ query)
        visited = {0}
        frontier = [(-entry_sim, 0)]
        best: list[tuple[float, int]] = [(entry_sim, 0)]
        while frontier:
            neg, node = heapq.heappop(frontier)
            if len(best) >= width and -neg < best[0][0]:
                break
            for nb in self.adj[node]:
                if nb >= n or nb in visited:
                    continue
                visited.add(nb)
                sim = float(self.matrix[nb] @ query)
                if len(best) < width or sim > best[0][0]:
                    heapq.heappush(frontier, (-sim, nb))
                    heapq.heappush(best, (sim, nb))
                    if len(best) > width:
                        heapq.heappop(best)
        return sorted(best, key=lambda t: (-t[0], t[1]))

    def neighbors_of(self, i: int) -> list[tuple[float, int]]:
        found = self._search(self.matrix[i], self.width)
        return [(sim, j) for sim, j in found if j != i]


@dataclass
class SimilarityIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray  # unit rows, one per id
    threshold: float
    mode: IndexMode
    skipped: int = 0
    _graph: Optional[_NswGraph] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if len(self.ids) != len(set(self.ids)):
            raise ValueError("index ids must be unique")
        if self.matrix.shape[0] != len(self.ids):
            raise ValueError("matrix row count must match id count")
        if self.matrix.shape[0]:
            norms = np.linalg.norm(self.matrix, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-9):
                raise ValueError("all index vectors must be unit-norm")
        if self.mode is IndexMode.APPROX and self._graph is None and len(self.ids) > 1:
            raise ValueError("approximate index requires a built graph")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_vectors(
        cls,
        ids: Iterable[str],
        matrix: np.ndarray,
        threshold: float = DEFAULT_THRESHOLD,
        mode: Optional[IndexMode] = None,
        config: Optional[DedupConfig] = None,
    ) -> "SimilarityIndex":
        cfg = config or DedupConfig(threshold=threshold)
        id_tuple = tuple(ids)
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix.reshape(0, 0) if matrix.size == 0 else matrix.reshape(1, -1)
        if mode is None:
            mode = cfg.mode or (
                IndexMode.EXACT if len(id_tuple) <= EXACT_MODE_MAX else IndexMode.APPROX
            )
        graph = None
        if mode is IndexMode.APPROX and len(id_tuple) > 1:
            graph = _NswGraph(matrix, cfg.graph_links, cfg.search_width)
        return cls(
            ids=id_tuple,
            matrix=matrix,
            threshold=threshold,
            mode=mode,
            _graph=graph,
        )


def build_index(
    quadruplets: list[Quadruplet],
    gateway: Gateway,
    config: Optional[DedupConfig] = None,
) -> SimilarityIndex:
    """Embed every instruction and assemble the similarity index.

    Records whose embedding fails are skipped and counted on the index.
    """
    cfg = config or DedupConfig()
    seen = set()
    for quad in quadruplets:
        if quad.instruction.id in seen:
            raise ValueError(f"duplicate instruction id: {quad.instruction.id}")
        seen.add(quad.instruction.id)

    ids: list[str] = []
    rows: list[np.ndarray] = []
    skipped = 0
    texts = [q.instruction.text for q in quadruplets]
    try:
        vectors: list[Optional[np.ndarray]] = list(gateway.embed(texts)) if texts else []
    except Exception:
        vectors = []
        for text in texts:
            try:
                vectors.append(gateway.embed([text])[0])
            except Exception:
                vectors.append(None)
    for quad, vec in zip(quadruplets, vectors):
        if vec is None:
            skipped += 1
            continue
        norm = float(np.linalg.norm(vec))
        if norm == 0.0 or not np.isfinite(norm):
            skipped += 1
            continue
        ids.append(quad.instruction.id)
        rows.append(np.asarray(vec, dtype=np.float64) / norm)

    dim = rows[0].shape[0] if rows else 0
    matrix = np.vstack(rows) if rows else np.zeros((0, dim))
    index = SimilarityIndex.from_vectors(
        ids, matrix, threshold=cfg.threshold, mode=cfg.mode, config=cfg
    )
    index.skipped = skipped
    return index


def _canonical_pair(a: str, b: str, sim: float) -> FlaggedPair:
    sim = min(1.0, max(-1.0, sim))
    return (a, b, sim) if a < b else (b, a, sim)


def flag_pairs(index: SimilarityIndex) -> list[FlaggedPair]:
    """All unordered id pairs at or above the threshold, best first."""
    n = len(index)
    if n < 2:
        return []
    if index.mode is IndexMode.EXACT:
        pairs = _flag_exact(index)
    else:
        pairs = _flag_approx(index)
    return sorted(pairs, key=lambda p: (-p[2], p[0], p[1]))


def _flag_exact(index: SimilarityIndex) -> list[FlaggedPair]:
    pairs: list[FlaggedPair] = []
    n = len(index)
    block = 1024
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = index.matrix[start:stop] @ index.matrix.T
        for row in range(stop - start):
            i = start + row
            hits = np.nonzero(sims[row, i + 1 :] >= index.threshold)[0]
            for off in hits:
                j = i + 1 + int(off)
                pairs.append(
                    _canonical_pair(index.ids[i], index.ids[j], float(sims[row, j]))
                )
    return pairs


def _flag_approx(index: SimilarityIndex) -> list[FlaggedPair]:
    assert index._graph is not None
    seen: set[tuple[str, str]] = set()
    pairs: list[FlaggedPair] = []
    for i in range(len(index)):
        for sim, j in index._graph.neighbors_of(i):
            if sim < index.threshold:
                continue
            a, b, s = _canonical_pair(index.ids[i], index.ids[j], sim)
            if (a, b) in seen:
                continue
            seen.add((a, b))
            pairs.append((a, b, s))
    return pairs


def verify_pair(a: Instruction, b: Instruction, gateway: Gateway) -> bool:
    """Ask the verifier whether two flagged instructions are the same task.

    Texts that normalize identically short-circuit to True without a
    model call. Replies other than a strict DUPLICATE/DISTINCT token are
    treated as DISTINCT: dropping a genuinely new problem costs more
    than keeping a near-duplicate.
    """
    if normalize(a.text) == normalize(b.text):
        return True
    prompt = render_prompt("dedup_verify", text_a=a.text, text_b=b.text)
    reply = gateway.chat(
        Role.JUDGE,
        [("system", load_prompt("system_judge")), ("user", prompt)],
        temperature=0.0,
    )
    verdict = parse_verifier_reply(reply.content)
    if not verdict and reply.content.strip().upper() not in ("DUPLICATE", "DISTINCT"):
        log.warning("verifier reply unparseable, treating pair as distinct")
    return verdict


class UnionFind:
    """Disjoint sets over string ids with union by rank and path compression."""

    def __init__(self, ids: Iterable[str] = ()) -> None:
        self.parent: dict[str, str] = {}
        self.rank: dict[str, int] = {}
        for x in ids:
            self.add(x)

    def add(self, x: str) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.rank[x] = 0

    def find(self, x: str) -> str:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> str:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return ra

    def groups(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for x in self.parent:
            out.setdefault(self.find(x), set()).add(x)
        return out


def cluster(
    confirmed_pairs: Iterable[tuple[str, str]], all_ids: Iterable[str]
) -> list[DupCluster]:
    """Merge confirmed pairs into equivalence classes of size >= 2.

    The representative recorded here is the smallest member id; callers
    holding the full records can re-pick by reasoning length via
    select_representatives.
    """
    uf = UnionFind(all_ids)
    known = set(uf.parent)
    for a, b in confirmed_pairs:
        if a not in known or b not in known:
            raise ValueError(f"pair id outside id universe: ({a}, {b})")
        uf.union(a, b)
    clusters = []
    for members in uf.groups().values():
        if len(members) < 2:
            continue
        clusters.append(
            DupCluster(member_ids=frozenset(members), representative_id=min(members))
        )
    clusters.sort(key=lambda c: min(c.member_ids))
    return clusters


def _best_member(members: Iterable[str], quad_by_id: dict[str, Quadruplet]) -> str:
    return min(members, key=lambda m: (-len(quad_by_id[m].reasoning.raw), m))


def select_representatives(
    clusters: list[DupCluster], quadruplets: list[Quadruplet]
) -> set[str]:
    """Retained id set: one member per cluster, everything else untouched.

    Within a cluster the member with the longest reasoning trace wins;
    ties go to the lexicographically smallest id.
    """
    quad_by_id = {q.instruction.id: q for q in quadruplets}
    retained = set(quad_by_id)
    for cl in clusters:
        missing = [m for m in cl.member_ids if m not in quad_by_id]
        if missing:
            raise ValueError(f"cluster members missing from dataset: {missing}")
        keep = _best_member(cl.member_ids, quad_by_id)
        retained -= cl.member_ids - {keep}
    return retained


@dataclass
class DedupReport:
    flagged: int = 0
    verified_duplicate: int = 0
    verified_distinct: int = 0
    deferred: int = 0
    retained: int = 0
    dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "flagged": self.flagged,
            "verified_duplicate": self.verified_duplicate,
            "verified_distinct": self.verified_distinct,
            "deferred": self.deferred,
            "retained": self.retained,
            "dropped": self.dropped,
        }


def verify_flagged(
    flagged: list[FlaggedPair],
    quad_by_id: dict[str, Quadruplet],
    gateway: Gateway,
    budget: int,
    report: DedupReport,
) -> list[tuple[str, str]]:
    """Run the verifier over flagged pairs in descending-cosine order.

    Pairs past the budget are treated as distinct and logged; transport
    failures defer the pair without merging it.
    """
    confirmed: list[tuple[str, str]] = []
    for k, (a_id, b_id, _sim) in enumerate(flagged):
        if k >= budget:
            rest = len(flagged) - k
            log.warning(
                "verification budget %d reached, treating %d pairs as distinct",
                budget,
                rest,
            )
            report.verified_distinct += rest
            break
        try:
            is_dup = verify_pair(
                quad_by_id[a_id].instruction, quad_by_id[b_id].instruction, gateway
            )
        except TransportError:
            report.deferred += 1
            continue
        if is_dup:
            confirmed.append((a_id, b_id))
            report.verified_duplicate += 1
        else:
            report.verified_distinct += 1
    return confirmed


def run_dedup(
    in_path: str,
    out_path: str,
    gateway: Gateway,
    config: Optional[DedupConfig] = None,
    clusters_path: Optional[str] = None,
    report_path: Optional[str] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> DedupReport:
    """Full pass: index, flag, verify, cluster, write the retained set."""
    cfg = config or DedupConfig()
    say = progress or (lambda _msg: None)
    quads = [Quadruplet.from_dict(rec) for rec in JsonlReader(in_path)]
    quad_by_id = {q.instruction.id: q for q in quads}

    index = build_index(quads, gateway, cfg)
    say(f"indexed {len(index)} instructions ({index.mode.value} mode)")
    flagged = flag_pairs(index)
    report = DedupReport(flagged=len(flagged))
    confirmed = verify_flagged(flagged, quad_by_id, gateway, cfg.verify_budget, report)
    say(f"flagged {len(flagged)} pairs, confirmed {len(confirmed)}")

    clusters = cluster(confirmed, list(quad_by_id))
    final_clusters = [
        DupCluster(
            member_ids=cl.member_ids,
            representative_id=_best_member(cl.member_ids, quad_by_id),
        )
        for cl in clusters
    ]
    retained = select_representatives(final_clusters, quads)
    report.retained = len(retained)
    report.dropped = len(quads) - len(retained)

    write_jsonl(out_path, (q.to_dict() for q in quads if q.instruction.id in retained))
    if clusters_path:
        write_jsonl(clusters_path, (cl.to_dict() for cl in final_clusters))
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(dumps(report.to_dict()) + "\n")
    say(f"retained {report.retained}, dropped {report.dropped}")
    return report
