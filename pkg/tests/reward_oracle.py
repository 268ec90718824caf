"""Independent straight-line reward implementation used as a test oracle.

Deliberately written with plain loops and math-module arithmetic, with
no imports from the package under test, so that agreement between the
two implementations is meaningful.
"""

import math

R_EDGE = 0.1
R_COLLISION = -100.0
R_GOAL = 50.0
R_PENALTY = -0.5

EPS_FORM = 0.10
EPS_COLL = 0.20
EPS_GOAL = 0.15


def oracle_reward(positions, lengths, goal,
                  eps_form=EPS_FORM, eps_coll=EPS_COLL, eps_goal=EPS_GOAL):
    """Evaluate the shared reward for one configuration.

    positions: list of (x, y) tuples
    lengths:   dict {(i, j): desired distance} (one entry per constrained pair)
    goal:      (x, y) tuple

    Returns (reward, label) with label in
    {"collision", "success", "formation", "none"}.
    """
    n = len(positions)

    for i in range(n):
        for j in range(i + 1, n):
            dx = positions[i][0] - positions[j][0]
            dy = positions[i][1] - positions[j][1]
            if math.hypot(dx, dy) <= eps_coll:
                return R_COLLISION, "collision"

    in_formation = True
    for (i, j), d in lengths.items():
        dx = positions[i][0] - positions[j][0]
        dy = positions[i][1] - positions[j][1]
        if abs(math.hypot(dx, dy) - d) > eps_form:
            in_formation = False
            break

    cx = sum(p[0] for p in positions) / n
    cy = sum(p[1] for p in positions) / n
    at_goal = math.hypot(cx - goal[0], cy - goal[1]) <= eps_goal

    if in_formation and at_goal:
        return R_GOAL, "success"
    if in_formation:
        return R_EDGE, "formation"
    return R_PENALTY, "none"
