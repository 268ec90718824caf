"""Minimally rigid observation graphs and the geometric task conditions.

The canonical construction adds one vertex at a time: agent 0 observes
nobody, agent 1 observes agent 0, and every later agent i observes
agents i-1 and i-2. That gives out-degree pattern (0, 1, 2, 2, ...) and
exactly 2n-3 undirected distance constraints, the minimum that pins a
planar shape up to rigid motion.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .se2 import Point2, Pose, wrap_angle

Edge = tuple[int, int]
LengthSpec = Union[float, Sequence[float], Mapping[Edge, float]]

DEFAULT_EPS_FORM = 0.10
DEFAULT_EPS_COLL = 0.20
DEFAULT_EPS_GOAL = 0.15


class TooFewAgents(ValueError):
    """A formation needs at least two agents."""


class UnrealizableShape(ValueError):
    """The requested edge lengths admit no planar realization."""


@dataclass(frozen=True)
class Thresholds:
    """Geometric tolerances for the formation, collision and goal tests."""

    eps_form: float = DEFAULT_EPS_FORM
    eps_coll: float = DEFAULT_EPS_COLL
    eps_goal: float = DEFAULT_EPS_GOAL

    def __post_init__(self) -> None:
        for name in ("eps_form", "eps_coll", "eps_goal"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def canonical_edges(n: int) -> list[Edge]:
    """Directed edge list of the vertex-addition construction, in order."""
    edges: list[Edge] = []
    for i in range(1, n):
        edges.append((i, i - 1))
        if i >= 2:
            edges.append((i, i - 2))
    return edges


@dataclass(frozen=True)
class FormationSpec:
    """A directed minimally rigid graph with desired edge lengths.

    `edges` is ordered; `desired_lengths` maps each directed edge to its
    target separation in meters. Construction validates minimal rigidity
    (2n-3 undirected edges, out-degrees 0,1,2,2,...), strict triangle
    inequalities on every mutually constrained triple, and that all
    targets stay above the collision threshold.
    """

    n_agents: int
    edges: tuple[Edge, ...]
    desired_lengths: Mapping[Edge, float]
    eps_coll: float = DEFAULT_EPS_COLL

    def __post_init__(self) -> None:
        n = self.n_agents
        if n < 2:
            raise TooFewAgents(f"need at least 2 agents, got {n}")
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "desired_lengths", dict(self.desired_lengths))

        out_degree = [0] * n
        undirected = set()
        for i, j in self.edges:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bad edge ({i}, {j})")
            out_degree[i] += 1
            undirected.add(frozenset((i, j)))
        expected = [0, 1] + [2] * (n - 2)
        if out_degree != expected[:n]:
            raise ValueError(f"out-degree pattern {out_degree} violates the construction")
        if len(undirected) != 2 * n - 3 and n >= 2:
            raise ValueError(f"{len(undirected)} undirected edges, expected {2 * n - 3}")
        if set(self.desired_lengths) != set(self.edges):
            raise ValueError("desired_lengths must cover exactly the edge set")
        for e, d in self.desired_lengths.items():
            if not (math.isfinite(d) and d > 0):
                raise ValueError(f"edge {e} has non-positive length {d}")
            if d <= self.eps_coll:
                raise UnrealizableShape(
                    f"edge {e} target {d} m is within the collision threshold {self.eps_coll} m"
                )
        _check_triangles(n, self.desired_lengths)

    def length(self, i: int, j: int) -> float:
        """Desired separation for the constraint between i and j (either direction)."""
        if (i, j) in self.desired_lengths:
            return self.desired_lengths[(i, j)]
        return self.desired_lengths[(j, i)]

    def out_edges(self, agent: int) -> list[Edge]:
        return [e for e in self.edges if e[0] == agent]

    def lengths_array(self) -> np.ndarray:
        """Desired lengths in edge order."""
        return np.array([self.desired_lengths[e] for e in self.edges], dtype=np.float64)


def _undirected_length_map(lengths: Mapping[Edge, float]) -> dict[frozenset, float]:
    return {frozenset(e): d for e, d in lengths.items()}


def _check_triangles(n: int, lengths: Mapping[Edge, float]) -> None:
    by_pair = _undirected_length_map(lengths)
    for a, b, c in itertools.combinations(range(n), 3):
        ab = by_pair.get(frozenset((a, b)))
        bc = by_pair.get(frozenset((b, c)))
        ca = by_pair.get(frozenset((c, a)))
        if ab is None or bc is None or ca is None:
            continue
        if ab >= bc + ca or bc >= ab + ca or ca >= ab + bc:
            raise UnrealizableShape(
                f"triple ({a},{b},{c}) with lengths ({ab}, {bc}, {ca}) "
                "violates the strict triangle inequality"
            )


def build_rigid_graph(
    n: int, shape_lengths: LengthSpec, eps_coll: float = DEFAULT_EPS_COLL
) -> FormationSpec:
    """Build the canonical minimally rigid spec for n agents.

    `shape_lengths` is a single float (uniform), a sequence in canonical
    edge order, or a mapping from directed edge to length.

    Raises TooFewAgents for n < 2 and UnrealizableShape when a triangle
    inequality fails or a length sits inside the collision threshold.
    """
    if n < 2:
        raise TooFewAgents(f"need at least 2 agents, got {n}")
    edges = canonical_edges(n)
    if isinstance(shape_lengths, Mapping):
        lengths = {}
        for e in edges:
            if e in shape_lengths:
                lengths[e] = float(shape_lengths[e])
            elif (e[1], e[0]) in shape_lengths:
                lengths[e] = float(shape_lengths[(e[1], e[0])])
            else:
                raise ValueError(f"missing length for canonical edge {e}")
    elif isinstance(shape_lengths, (int, float)):
        lengths = {e: float(shape_lengths) for e in edges}
    else:
        vals = list(shape_lengths)
        if len(vals) != len(edges):
            raise ValueError(f"expected {len(edges)} lengths, got {len(vals)}")
        lengths = {e: float(v) for e, v in zip(edges, vals)}
    return FormationSpec(n_agents=n, edges=tuple(edges), desired_lengths=lengths, eps_coll=eps_coll)


def spec_from_points(points: Sequence[Point2], eps_coll: float = DEFAULT_EPS_COLL) -> FormationSpec:
    """Convenience constructor: derive canonical edge lengths from target coordinates."""
    pts = [(p.x, p.y) for p in points]
    lengths = {
        (i, j): math.dist(pts[i], pts[j]) for i, j in canonical_edges(len(pts))
    }
    return build_rigid_graph(len(pts), lengths, eps_coll=eps_coll)


def _positions_array(positions: Sequence[Point2]) -> np.ndarray:
    if positions and isinstance(positions[0], Point2):
        return np.array([[p.x, p.y] for p in positions], dtype=np.float64)
    return np.asarray(positions, dtype=np.float64)


def edge_errors(positions: Sequence[Point2], spec: FormationSpec) -> np.ndarray:
    """Absolute distance error per directed edge, in spec.edges order."""
    pts = _positions_array(positions)
    if len(pts) != spec.n_agents:
        raise ValueError(f"expected {spec.n_agents} positions, got {len(pts)}")
    idx = np.array(spec.edges, dtype=np.intp)
    dists = np.linalg.norm(pts[idx[:, 0]] - pts[idx[:, 1]], axis=1)
    return np.abs(dists - spec.lengths_array())


def formation_condition(
    positions: Sequence[Point2], spec: FormationSpec, th: Thresholds
) -> bool:
    """True iff every constrained edge is within eps_form of its target."""
    return bool(np.all(edge_errors(positions, spec) <= th.eps_form))


def collision_condition(positions: Sequence[Point2], th: Thresholds) -> bool:
    """True iff any unordered pair of agents is at distance <= eps_coll.

    Collision is checked over all pairs, not only graph edges; two
    unconstrained agents touching is still a physical collision.
    """
    pts = _positions_array(positions)
    n = len(pts)
    for i in range(n):
        d = np.linalg.norm(pts[i + 1 :] - pts[i], axis=1)
        if np.any(d <= th.eps_coll):
            return True
    return False


def centroid(positions: Sequence[Point2]) -> Point2:
    """Arithmetic mean of the agent positions."""
    pts = _positions_array(positions)
    if len(pts) == 0:
        raise ValueError("centroid of no points")
    m = pts.mean(axis=0)
    return Point2(float(m[0]), float(m[1]))


def success_condition(
    positions: Sequence[Point2], goal: Point2, spec: FormationSpec, th: Thresholds
) -> bool:
    """Formation held and centroid within eps_goal of the goal point."""
    if not formation_condition(positions, spec, th):
        return False
    c = centroid(positions)
    return math.dist((c.x, c.y), (goal.x, goal.y)) <= th.eps_goal


def canonical_positions(spec: FormationSpec) -> np.ndarray:
    """Exact realization of the spec, anchored at the origin.

    Vertex 0 sits at the origin, vertex 1 on the +x axis, and every later
    vertex is placed by circle intersection against its two observed
    neighbours, always picking the same half-plane.
    """
    n = spec.n_agents
    pts = np.zeros((n, 2), dtype=np.float64)
    if n >= 2:
        pts[1] = (spec.length(1, 0), 0.0)
    for i in range(2, n):
        a = pts[i - 1]
        b = pts[i - 2]
        ra = spec.length(i, i - 1)
        rb = spec.length(i, i - 2)
        d = float(np.linalg.norm(b - a))
        ex = (b - a) / d
        ey = np.array([-ex[1], ex[0]])
        x = (d * d + ra * ra - rb * rb) / (2.0 * d)
        y_sq = ra * ra - x * x
        if y_sq <= 0:
            raise UnrealizableShape(f"vertex {i} has no non-degenerate placement")
        pts[i] = a + x * ex + math.sqrt(y_sq) * ey
    return pts


def formation_radius(spec: FormationSpec) -> float:
    """Largest centroid-to-vertex distance of the exact realization."""
    pts = canonical_positions(spec)
    return float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).max())


def place_formation(
    center: Point2,
    spec: FormationSpec,
    orientation: float,
    rng: np.random.Generator,
) -> list[Pose]:
    """Poses realizing the spec exactly, centered and rotated as requested.

    Positions satisfy every desired length to machine precision with the
    centroid at `center`, the whole shape rotated by `orientation` about
    the center. Headings are drawn uniformly from (-pi, pi].
    """
    pts = canonical_positions(spec)
    pts = pts - pts.mean(axis=0)
    c, s = math.cos(orientation), math.sin(orientation)
    rot = np.array([[c, -s], [s, c]])
    pts = pts @ rot.T + np.array([center.x, center.y])
    headings = [wrap_angle(float(t)) for t in rng.uniform(-math.pi, math.pi, size=spec.n_agents)]
    return [Pose(float(p[0]), float(p[1]), h) for p, h in zip(pts, headings)]


def spec_to_json(spec: FormationSpec) -> str:
    """Serialize to the interchange document {"n": ..., "edges": [[i, j, length], ...]}."""
    doc = {
        "n": spec.n_agents,
        "edges": [[i, j, spec.desired_lengths[(i, j)]] for i, j in spec.edges],
    }
    return json.dumps(doc)


def spec_from_json(text: str) -> FormationSpec:
    """Parse the JSON interchange document, re-validating all invariants."""
    doc = json.loads(text)
    n = int(doc["n"])
    edges = []
    lengths = {}
    for item in doc["edges"]:
        i, j, d = int(item[0]), int(item[1]), float(item[2])
        edges.append((i, j))
        lengths[(i, j)] = d
    return FormationSpec(n_agents=n, edges=tuple(edges), desired_lengths=lengths)
