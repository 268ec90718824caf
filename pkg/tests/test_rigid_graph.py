import json
import math

import numpy as np
import pytest

from formation_marl.rigid_graph import (
    FormationSpec,
    Thresholds,
    TooFewAgents,
    UnrealizableShape,
    build_rigid_graph,
    canonical_positions,
    centroid,
    collision_condition,
    edge_errors,
    formation_condition,
    formation_radius,
    place_formation,
    spec_from_json,
    spec_from_points,
    spec_to_json,
    success_condition,
)
from formation_marl.se2 import Point2

TH = Thresholds()


def equilateral(side=1.0):
    return build_rigid_graph(3, side)


def undirected_count(spec):
    return len({frozenset(e) for e in spec.edges})


class TestBuildRigidGraph:
    def test_triangle_has_three_edges(self):
        spec = equilateral()
        assert undirected_count(spec) == 3
        assert spec.n_agents == 3

    def test_four_agents_have_five_edges(self):
        spec = build_rigid_graph(4, 1.0)
        assert undirected_count(spec) == 2 * 4 - 3

    def test_triangle_inequality_violation(self):
        with pytest.raises(UnrealizableShape):
            build_rigid_graph(3, (1.0, 1.0, 3.0))

    def test_too_few_agents(self):
        with pytest.raises(TooFewAgents):
            build_rigid_graph(1, 1.0)

    def test_degenerate_collinear_rejected(self):
        # equality in the triangle inequality must also fail
        with pytest.raises(UnrealizableShape):
            build_rigid_graph(3, (1.0, 1.0, 2.0))

    def test_lengths_below_collision_threshold_rejected(self):
        with pytest.raises(UnrealizableShape):
            build_rigid_graph(3, 0.15)

    def test_mapping_input_accepts_either_direction(self):
        spec = build_rigid_graph(3, {(0, 1): 1.0, (1, 2): 1.2, (2, 0): 0.9})
        assert spec.length(1, 0) == 1.0
        assert spec.length(2, 1) == 1.2

    def test_out_degree_pattern(self):
        for n in range(2, 11):
            spec = build_rigid_graph(n, 1.0)
            degrees = [len(spec.out_edges(i)) for i in range(n)]
            assert degrees == [0, 1] + [2] * (n - 2)
            assert undirected_count(spec) == 2 * n - 3

    def test_from_points_round_trips_lengths(self):
        pts = [Point2(0, 0), Point2(1.3, 0), Point2(0.4, 1.1), Point2(1.5, 1.4)]
        spec = spec_from_points(pts)
        errs = edge_errors(pts, spec)
        assert np.all(errs < 1e-12)


class TestEdgeErrors:
    def test_perfect_triangle_zero_error(self):
        spec = equilateral()
        pts = [Point2(0, 0), Point2(1, 0), Point2(0.5, math.sqrt(3) / 2)]
        assert np.allclose(edge_errors(pts, spec), 0.0, atol=1e-12)

    def test_near_perfect_triangle(self):
        spec = equilateral()
        pts = [Point2(0, 0), Point2(1, 0), Point2(0.5, 0.866)]
        assert np.all(edge_errors(pts, spec) < 1e-3)

    def test_collinear_displacement(self):
        spec = build_rigid_graph(2, 1.0)
        pts = [Point2(0, 0), Point2(1.2, 0)]
        assert edge_errors(pts, spec)[0] == pytest.approx(0.2)

    def test_wrong_position_count(self):
        with pytest.raises(ValueError):
            edge_errors([Point2(0, 0)], equilateral())

    def test_permutation_consistency(self):
        rng = np.random.default_rng(11)
        spec = build_rigid_graph(5, {e: float(rng.uniform(0.8, 1.6)) for e in
                                     build_rigid_graph(5, 1.0).edges})
        pts = rng.uniform(0, 5, size=(5, 2))
        base = sorted(edge_errors([Point2(*p) for p in pts], spec))
        for _ in range(20):
            perm = rng.permutation(5)
            moved = np.empty_like(pts)
            moved[perm] = pts
            relabeled = [
                abs(np.linalg.norm(moved[perm[i]] - moved[perm[j]]) - spec.desired_lengths[(i, j)])
                for i, j in spec.edges
            ]
            assert np.allclose(sorted(relabeled), base, atol=1e-12)


class TestConditions:
    def test_formation_true_at_zero_error(self):
        spec = equilateral()
        pts = [Point2(0, 0), Point2(1, 0), Point2(0.5, math.sqrt(3) / 2)]
        assert formation_condition(pts, spec, TH)

    def test_formation_false_above_tolerance(self):
        # one edge off by 0.12 m with eps_form = 0.10 m
        spec = build_rigid_graph(2, 1.0)
        assert not formation_condition([Point2(0, 0), Point2(1.12, 0)], spec, TH)

    def test_formation_boundary_is_inclusive(self):
        # 1.125 - 1.0 = 0.125 exactly in binary, equal to the tolerance
        spec = build_rigid_graph(2, 1.0)
        th = Thresholds(eps_form=0.125, eps_coll=0.2, eps_goal=0.15)
        assert formation_condition([Point2(0, 0), Point2(1.125, 0)], spec, th)

    def test_collision_within_threshold(self):
        assert collision_condition([Point2(0, 0), Point2(0.15, 0)], TH)

    def test_no_collision_in_triangle(self):
        pts = [Point2(0, 0), Point2(1, 0), Point2(0.5, math.sqrt(3) / 2)]
        assert not collision_condition(pts, TH)

    def test_coincident_agents_collide(self):
        assert collision_condition([Point2(2, 2), Point2(2, 2), Point2(5, 5)], TH)

    def test_collision_checks_unconstrained_pairs(self):
        # agents 0 and 3 share no edge in the canonical 4-agent graph
        spec = build_rigid_graph(4, 1.0)
        assert frozenset((0, 3)) not in {frozenset(e) for e in spec.edges}
        pts = [Point2(0, 0), Point2(1, 0), Point2(0.5, 0.9), Point2(0.1, 0.05)]
        assert collision_condition(pts, TH)

    def test_success_requires_both_conditions(self):
        spec = equilateral()
        pts = [Point2(0, 0), Point2(1, 0), Point2(0.5, math.sqrt(3) / 2)]
        c = centroid(pts)
        assert success_condition(pts, c, spec, TH)
        # in formation but goal 0.16 m away from the centroid
        far = Point2(c.x + 0.16, c.y)
        assert not success_condition(pts, far, spec, TH)
        # at the goal but far out of formation
        broken = [Point2(0, 0), Point2(2, 0), Point2(1, 1.6)]
        assert not success_condition(broken, centroid(broken), spec, TH)


class TestCentroid:
    def test_triangle_mean(self):
        c = centroid([Point2(0, 0), Point2(1, 0), Point2(0.5, 0.866)])
        assert c.x == pytest.approx(0.5)
        assert c.y == pytest.approx(0.2887, abs=1e-4)

    def test_single_point(self):
        c = centroid([Point2(3, -4)])
        assert (c.x, c.y) == (3, -4)

    def test_square_symmetry(self):
        c = centroid([Point2(0, 0), Point2(2, 0), Point2(2, 2), Point2(0, 2)])
        assert (c.x, c.y) == (1.0, 1.0)


class TestPlaceFormation:
    def test_centroid_at_center(self):
        rng = np.random.default_rng(12)
        poses = place_formation(Point2(5, 5), equilateral(), 0.3, rng)
        pts = [p.position for p in poses]
        c = centroid(pts)
        assert c.x == pytest.approx(5.0, abs=1e-12)
        assert c.y == pytest.approx(5.0, abs=1e-12)

    def test_exact_formation_by_construction(self):
        rng = np.random.default_rng(13)
        for n in (2, 3, 5, 8):
            spec = build_rigid_graph(n, 1.0)
            poses = place_formation(Point2(4, 6), spec, float(rng.uniform(-3, 3)), rng)
            errs = edge_errors([p.position for p in poses], spec)
            assert np.all(errs < 1e-9)
            assert formation_condition([p.position for p in poses], spec, TH)

    def test_orientation_pi_reflects_through_center(self):
        spec = equilateral()
        rng = np.random.default_rng(14)
        base = place_formation(Point2(2, 3), spec, 0.0, rng)
        rng = np.random.default_rng(14)
        flipped = place_formation(Point2(2, 3), spec, math.pi, rng)
        for p, q in zip(base, flipped):
            assert q.x == pytest.approx(2 * 2 - p.x, abs=1e-9)
            assert q.y == pytest.approx(2 * 3 - p.y, abs=1e-9)

    def test_headings_in_range_and_seeded(self):
        spec = equilateral()
        a = place_formation(Point2(0, 0), spec, 0.0, np.random.default_rng(7))
        b = place_formation(Point2(0, 0), spec, 0.0, np.random.default_rng(7))
        assert all(-math.pi < p.theta <= math.pi for p in a)
        assert all(p.theta == q.theta for p, q in zip(a, b))

    def test_radius_of_unit_triangle(self):
        # circumradius of an equilateral triangle with unit side
        assert formation_radius(equilateral()) == pytest.approx(1 / math.sqrt(3), abs=1e-12)


class TestRigidMotionInvariance:
    def test_errors_and_conditions_invariant(self):
        rng = np.random.default_rng(15)
        spec = build_rigid_graph(4, (1.0, 1.1, 0.9, 1.2, 1.3))
        for _ in range(50):
            pts = rng.uniform(0, 6, size=(4, 2))
            ang = float(rng.uniform(-math.pi, math.pi))
            shift = rng.uniform(-3, 3, size=2)
            rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
            moved = pts @ rot.T + shift
            p0 = [Point2(*p) for p in pts]
            p1 = [Point2(*p) for p in moved]
            assert np.abs(edge_errors(p0, spec) - edge_errors(p1, spec)).max() < 1e-9
            assert formation_condition(p0, spec, TH) == formation_condition(p1, spec, TH)
            c0 = centroid(p0).as_array()
            c1 = centroid(p1).as_array()
            assert np.abs(rot @ c0 + shift - c1).max() < 1e-9

    def test_success_at_own_centroid(self):
        rng = np.random.default_rng(16)
        spec = equilateral()
        for _ in range(50):
            pts = place_formation(
                Point2(*rng.uniform(2, 8, size=2)), spec, float(rng.uniform(-3, 3)), rng
            )
            positions = [p.position for p in pts]
            if formation_condition(positions, spec, TH):
                assert success_condition(positions, centroid(positions), spec, TH)


class TestJsonInterchange:
    def test_round_trip(self):
        spec = build_rigid_graph(4, (1.0, 1.1, 0.9, 1.2, 1.3))
        again = spec_from_json(spec_to_json(spec))
        assert again.n_agents == spec.n_agents
        assert again.edges == spec.edges
        assert again.desired_lengths == spec.desired_lengths

    def test_document_shape(self):
        doc = json.loads(spec_to_json(equilateral()))
        assert set(doc) == {"n", "edges"}
        assert doc["n"] == 3
        assert all(len(item) == 3 for item in doc["edges"])

    def test_invalid_document_rejected(self):
        doc = {"n": 3, "edges": [[1, 0, 1.0], [2, 1, 1.0], [2, 0, 3.0]]}
        with pytest.raises(UnrealizableShape):
            spec_from_json(json.dumps(doc))


class TestThresholds:
    def test_defaults(self):
        th = Thresholds()
        assert (th.eps_form, th.eps_coll, th.eps_goal) == (0.10, 0.20, 0.15)

    def test_positivity(self):
        with pytest.raises(ValueError):
            Thresholds(eps_form=0.0)
