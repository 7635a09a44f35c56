"""Grid shape recovery from node tilts and rod lengths.

Stage one integrates tilt chains: row 0 gives each column its x-z anchor,
then every column is integrated in the y-z plane from that anchor, both
with trapezoidal headings (the mean of the endpoint tilts steers each
segment). Stage two refines all positions jointly by damped Gauss-Newton
over two residual families per rod: the chord length against the measured
distance, and the chord elevation against the mean endpoint tilt component
along the rod axis.

The chord elevation of a circular arc equals the mean of its endpoint
tangent angles, so both stages reproduce constant-curvature bends exactly;
that identity is what the noiseless recovery tests lean on.

Observations cannot fix where the grid sits in the world: tilts and
distances are invariant under translation and yaw. The gauge is fixed by
pinning the anchor node (lexicographically smallest grid coordinate) at
its initial position and pinning the cross-axis coordinate of the far end
of the anchor's first row rod.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DISTANCE_WEIGHT = 1.0 / 0.05 ** 2          # (0.05 mm)^-2
DEFAULT_TILT_WEIGHT = 1.0 / math.radians(0.5) ** 2  # (0.5 deg)^-2
DEFAULT_MAX_ITER = 100
DEFAULT_STEP_TOL = 1e-10
DEFAULT_GRADIENT_TOL = 1e-8
_LAMBDA_INIT = 1e-3
_LAMBDA_LIMIT = 1e12

Coord = tuple[int, int]


class DimensionMismatch(ValueError):
    pass


class DisconnectedGrid(ValueError):
    pass


@dataclass(frozen=True)
class GridShape:
    nu: int
    nv: int
    pitch_mm: float


@dataclass(frozen=True)
class TiltObservation:
    """Per-node inclinations: alpha_u about the row axis, alpha_v about the
    column axis, both in radians from the horizontal."""

    node: Coord
    alpha_u: float
    alpha_v: float
    weight: float = DEFAULT_TILT_WEIGHT

    @classmethod
    def from_accel(cls, node: Coord, accel_g, weight: float = DEFAULT_TILT_WEIGHT):
        ax = min(1.0, max(-1.0, accel_g[0]))
        ay = min(1.0, max(-1.0, accel_g[1]))
        return cls(node=node, alpha_u=math.asin(ax), alpha_v=math.asin(ay),
                   weight=weight)


@dataclass(frozen=True)
class DistanceObservation:
    node_i: Coord
    node_j: Coord
    d_mm: float
    weight: float = DEFAULT_DISTANCE_WEIGHT

    def __post_init__(self):
        if self.d_mm <= 0:
            raise ValueError("distance must be positive")
        du = abs(self.node_i[0] - self.node_j[0])
        dv = abs(self.node_i[1] - self.node_j[1])
        if du + dv != 1:
            raise ValueError(f"nodes {self.node_i} and {self.node_j} are not "
                             f"grid-adjacent")

    @property
    def edge(self) -> tuple[Coord, Coord]:
        return (min(self.node_i, self.node_j), max(self.node_i, self.node_j))


@dataclass
class InitialGrid:
    positions: dict[Coord, np.ndarray]
    filled_edges: frozenset[tuple[Coord, Coord]]
    filled_tilts: frozenset[Coord]


@dataclass
class ReconstructionResult:
    positions: dict[Coord, np.ndarray]
    residual_rms: dict[str, float]
    iterations: int
    converged: bool
    objective_trace: tuple[float, ...] = ()


def integrate_chain(alphas, lengths, origin=(0.0, 0.0)) -> np.ndarray:
    """Planar chain positions from tilts at the joints.

    Returns an (n+1, 2) array of (x, z); segment i advances by
    lengths[i] * (cos(a), sin(a)) with a the mean of alphas[i] and
    alphas[i+1].
    """
    alphas = np.asarray(alphas, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    if alphas.ndim != 1 or lengths.ndim != 1 or len(alphas) != len(lengths) + 1:
        raise DimensionMismatch(
            f"need n+1 tilts for n segments, got {len(alphas)} and {len(lengths)}")
    if len(lengths) < 1:
        raise DimensionMismatch("need at least one segment")
    if np.any(lengths <= 0):
        raise DimensionMismatch("segment lengths must be positive")
    headings = (alphas[:-1] + alphas[1:]) / 2.0
    steps = np.stack([lengths * np.cos(headings), lengths * np.sin(headings)],
                     axis=1)
    positions = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)])
    return positions + np.asarray(origin, dtype=float)


def _index_observations(tilts, distances):
    tilt_by_node: dict[Coord, TiltObservation] = {}
    for t in tilts:
        if t.node in tilt_by_node:
            raise ValueError(f"duplicate tilt observation for {t.node}")
        tilt_by_node[t.node] = t
    dist_by_edge: dict[tuple[Coord, Coord], DistanceObservation] = {}
    for d in distances:
        if d.edge in dist_by_edge:
            raise ValueError(f"duplicate distance observation for {d.edge}")
        dist_by_edge[d.edge] = d
    return tilt_by_node, dist_by_edge


def assemble_initial_grid(tilts, distances, shape: GridShape) -> InitialGrid:
    """Chain-integrated starting geometry for the full shape.nu x shape.nv grid.

    Missing tilts integrate as zero and missing rod lengths as the nominal
    pitch; both are reported in the fill-in sets. A node with neither a
    tilt nor any incident distance is unplaceable and raises
    DisconnectedGrid.
    """
    tilt_by_node, dist_by_edge = _index_observations(tilts, distances)
    filled_edges: set[tuple[Coord, Coord]] = set()
    filled_tilts: set[Coord] = set()

    for u in range(shape.nu):
        for v in range(shape.nv):
            node = (u, v)
            incident = [e for e in dist_by_edge if node in e]
            if node not in tilt_by_node and not incident:
                raise DisconnectedGrid(f"node {node} has no observations")

    def tilt_of(node: Coord, component: str) -> float:
        obs = tilt_by_node.get(node)
        if obs is None:
            filled_tilts.add(node)
            return 0.0
        return obs.alpha_u if component == "u" else obs.alpha_v

    def length_of(a: Coord, b: Coord) -> float:
        edge = (min(a, b), max(a, b))
        obs = dist_by_edge.get(edge)
        if obs is None:
            filled_edges.add(edge)
            return shape.pitch_mm
        return obs.d_mm

    positions: dict[Coord, np.ndarray] = {}
    row_alphas = [tilt_of((u, 0), "u") for u in range(shape.nu)]
    if shape.nu > 1:
        row_lengths = [length_of((u, 0), (u + 1, 0)) for u in range(shape.nu - 1)]
        row_xz = integrate_chain(row_alphas, row_lengths)
    else:
        row_xz = np.zeros((1, 2))
    for u in range(shape.nu):
        positions[(u, 0)] = np.array([row_xz[u, 0], 0.0, row_xz[u, 1]])

    if shape.nv > 1:
        for u in range(shape.nu):
            col_alphas = [tilt_of((u, v), "v") for v in range(shape.nv)]
            col_lengths = [length_of((u, v), (u, v + 1))
                           for v in range(shape.nv - 1)]
            col_yz = integrate_chain(col_alphas, col_lengths)
            base = positions[(u, 0)]
            for v in range(1, shape.nv):
                positions[(u, v)] = np.array([
                    base[0], col_yz[v, 0], base[2] + col_yz[v, 1]])

    return InitialGrid(positions=positions,
                       filled_edges=frozenset(filled_edges),
                       filled_tilts=frozenset(filled_tilts))


class ReconstructionProblem:
    """Weighted least-squares shape problem over free node coordinates.

    Exposes the packed parameter vector and an analytic residual/Jacobian
    evaluation; refine() drives it, and the Jacobian check differentiates
    it numerically.
    """

    def __init__(self, init_positions: dict[Coord, np.ndarray], tilts, distances):
        if len(init_positions) < 2 or not distances:
            raise ValueError("need at least two nodes and one distance")
        tilt_by_node, dist_by_edge = _index_observations(tilts, distances)
        for edge in dist_by_edge:
            for node in edge:
                if node not in init_positions:
                    raise ValueError(f"distance references unplaced node {node}")
        self.coords: list[Coord] = sorted(init_positions)
        self.anchor = self.coords[0]
        self.distances = [dist_by_edge[e] for e in sorted(dist_by_edge)]

        # Per-edge tilt targets: mean of the endpoint components along the
        # edge axis, from whichever endpoints carry a tilt observation.
        self.edge_tilts: list[tuple[tuple[Coord, Coord], float, float]] = []
        for edge in sorted(dist_by_edge):
            a, b = edge
            component = "u" if a[0] != b[0] else "v"
            values, weights = [], []
            for node in edge:
                obs = tilt_by_node.get(node)
                if obs is not None:
                    values.append(obs.alpha_u if component == "u" else obs.alpha_v)
                    weights.append(obs.weight)
            if values:
                self.edge_tilts.append(
                    (edge, float(np.mean(values)), float(np.mean(weights))))

        pinned = {self.anchor: (True, True, True)}
        heading = self._heading_pin(dist_by_edge)
        if heading is not None:
            node, axis = heading
            flags = [False, False, False]
            flags[axis] = True
            pinned[node] = tuple(flags)
        self.param_index: dict[Coord, list[int]] = {}
        n = 0
        for coord in self.coords:
            flags = pinned.get(coord, (False, False, False))
            slots = []
            for axis in range(3):
                if flags[axis]:
                    slots.append(-1)
                else:
                    slots.append(n)
                    n += 1
            self.param_index[coord] = slots
        self.n_params = n
        self._fixed = {coord: np.asarray(init_positions[coord], dtype=float)
                       for coord in self.coords}
        self.x0 = self.pack(init_positions)

    def _heading_pin(self, dist_by_edge) -> tuple[Coord, int] | None:
        """(node, pinned axis) holding the anchor row's heading in plane."""
        row_edges = sorted(e for e in dist_by_edge
                           if e[0][1] == e[1][1] == self.anchor[1]
                           and e[0][0] != e[1][0])
        if row_edges:
            # canonical edges are ordered, so [1] is never the anchor
            return row_edges[0][1], 1  # keep the first row in the x-z plane
        col_edges = sorted(e for e in dist_by_edge if e[0][0] == e[1][0])
        if col_edges:
            return col_edges[0][1], 0  # keep the first column in the y-z plane
        return None

    def pack(self, positions: dict[Coord, np.ndarray]) -> np.ndarray:
        x = np.zeros(self.n_params)
        for coord in self.coords:
            for axis, slot in enumerate(self.param_index[coord]):
                if slot >= 0:
                    x[slot] = positions[coord][axis]
        return x

    def unpack(self, x: np.ndarray) -> dict[Coord, np.ndarray]:
        out = {}
        for coord in self.coords:
            p = self._fixed[coord].copy()
            for axis, slot in enumerate(self.param_index[coord]):
                if slot >= 0:
                    p[axis] = x[slot]
            out[coord] = p
        return out

    def residuals(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Weighted residual vector and its analytic Jacobian at x."""
        positions = self.unpack(x)
        m = len(self.distances) + len(self.edge_tilts)
        r = np.zeros(m)
        jac = np.zeros((m, self.n_params))

        def scatter(row: int, coord: Coord, grad: np.ndarray) -> None:
            for axis, slot in enumerate(self.param_index[coord]):
                if slot >= 0:
                    jac[row, slot] += grad[axis]

        row = 0
        for obs in self.distances:
            a, b = obs.edge
            delta = positions[b] - positions[a]
            norm = float(np.linalg.norm(delta))
            sw = math.sqrt(obs.weight)
            if norm == 0.0:
                r[row] = sw * (-obs.d_mm)
                row += 1
                continue
            r[row] = sw * (norm - obs.d_mm)
            grad = sw * delta / norm
            scatter(row, b, grad)
            scatter(row, a, -grad)
            row += 1
        ez = np.array([0.0, 0.0, 1.0])
        for edge, alpha, weight in self.edge_tilts:
            a, b = edge
            delta = positions[b] - positions[a]
            norm = float(np.linalg.norm(delta))
            sw = math.sqrt(weight)
            if norm == 0.0:
                r[row] = sw * (0.0 - alpha)
                row += 1
                continue
            s = delta[2] / norm
            clamped = min(1.0, max(-1.0, s))
            r[row] = sw * (math.asin(clamped) - alpha)
            if abs(s) < 1.0 - 1e-12:
                factor = sw / math.sqrt(1.0 - s * s)
                grad = factor * (ez / norm - (delta[2] / norm ** 3) * delta)
                scatter(row, b, grad)
                scatter(row, a, -grad)
            row += 1
        return r, jac

    def residual_rms(self, positions: dict[Coord, np.ndarray]) -> dict[str, float]:
        """Unweighted physical-unit residual summary at the given positions."""
        dist_sq = []
        for obs in self.distances:
            a, b = obs.edge
            dist_sq.append(
                (float(np.linalg.norm(positions[b] - positions[a])) - obs.d_mm) ** 2)
        tilt_sq = []
        for edge, alpha, _ in self.edge_tilts:
            a, b = edge
            delta = positions[b] - positions[a]
            norm = float(np.linalg.norm(delta))
            s = min(1.0, max(-1.0, delta[2] / norm)) if norm > 0 else 0.0
            tilt_sq.append((math.asin(s) - alpha) ** 2)
        return {
            "distance_mm": math.sqrt(np.mean(dist_sq)) if dist_sq else 0.0,
            "tilt_rad": math.sqrt(np.mean(tilt_sq)) if tilt_sq else 0.0,
        }


def refine(init_positions: dict[Coord, np.ndarray], tilts, distances,
           max_iter: int = DEFAULT_MAX_ITER,
           tol: float = DEFAULT_STEP_TOL,
           gradient_tol: float = DEFAULT_GRADIENT_TOL) -> ReconstructionResult:
    """Jointly adjust all free positions by Levenberg-damped Gauss-Newton.

    Steps that do not reduce the objective are rejected with tenfold
    damping; accepted steps relax it tenfold. A vanishing gradient stops
    the loop before a step is attempted, so a start at a stationary point
    is not dragged along near-null directions by rounding noise. Returns
    the best visited positions with converged=False when damping escalates
    past its limit (singular or stalled normal equations) or iterations
    run out.
    """
    problem = ReconstructionProblem(init_positions, tilts, distances)
    x = problem.x0.copy()
    r, jac = problem.residuals(x)
    cost = float(r @ r)
    lam = _LAMBDA_INIT
    trace = [cost]
    converged = False
    iterations = 0
    while iterations < max_iter:
        if float(np.max(np.abs(jac.T @ r), initial=0.0)) < gradient_tol:
            converged = True
            break
        iterations += 1
        jtj = jac.T @ jac
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj + lam * np.eye(problem.n_params), -jtr)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > _LAMBDA_LIMIT:
                break
            continue
        x_new = x + step
        r_new, jac_new = problem.residuals(x_new)
        cost_new = float(r_new @ r_new)
        if math.isfinite(cost_new) and cost_new <= cost:
            x, r, jac, cost = x_new, r_new, jac_new, cost_new
            trace.append(cost)
            lam = max(lam / 10.0, 1e-15)
            if float(np.linalg.norm(step)) < tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > _LAMBDA_LIMIT:
                break
    positions = problem.unpack(x)
    return ReconstructionResult(
        positions=positions,
        residual_rms=problem.residual_rms(positions),
        iterations=iterations,
        converged=converged,
        objective_trace=tuple(trace),
    )


def check_jacobian(residual_fn, x: np.ndarray, step: float) -> float:
    """Largest deviation between the analytic Jacobian and central
    differences, relative to max(1, |entry|).

    residual_fn maps a parameter vector to (residuals, jacobian). Raises
    when the residuals are not finite at x, which catches coincident-node
    inputs before they poison the comparison.
    """
    r0, jac = residual_fn(x)
    if not np.all(np.isfinite(r0)) or not np.all(np.isfinite(jac)):
        raise ValueError("residuals not finite at the linearization point")
    worst = 0.0
    for k in range(len(x)):
        forward = x.copy()
        forward[k] += step
        backward = x.copy()
        backward[k] -= step
        fd = (residual_fn(forward)[0] - residual_fn(backward)[0]) / (2.0 * step)
        denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(jac[:, k])))
        worst = max(worst, float(np.max(np.abs(fd - jac[:, k]) / denom)))
    return worst


def write_positions_csv(destination, positions: dict[Coord, np.ndarray],
                        node_ids: dict[Coord, str]) -> None:
    """One row per node, sorted by grid coordinate, 6 decimal places.

    destination is a path or an open text stream.
    """
    def emit(fh) -> None:
        fh.write("node_id,u,v,x_mm,y_mm,z_mm\n")
        for coord in sorted(positions):
            p = positions[coord]
            fh.write(f"{node_ids[coord]},{coord[0]},{coord[1]},"
                     f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f}\n")

    if hasattr(destination, "write"):
        emit(destination)
    else:
        with open(destination, "w", encoding="utf-8") as fh:
            emit(fh)
