"""Quasi-static tendon-driven soft-finger simulator.

A finger is a capped solid cylinder of near-incompressible hyperelastic
material (stable Neo-Hookean energy per tet), clamped at its base, with
four tendon polylines and four strain-sensor polylines embedded inside.
Two servo channels per finger each drive an antagonistic tendon pair:
channel value u in [0, 1] pulls one tendon's path-length target down to
(1 - c u) L0 and releases the opposite one to (1 + c u) L0, both through
stiff quadratic penalties. External "contact-like" forces are dead loads
spread over surface nodes with a Gaussian falloff computed on the rest
shape.

Equilibria come from damped Newton with backtracking line search on the
total energy; there are no dynamics. The Newton matrix splits into a
banded local part (elastic plus tendon curvature, factorized with a
banded Cholesky) and one rank-1 term per tendon handled by the
Woodbury identity; that split is what makes dataset-scale solving cheap.
Units: mm, kPa, mN (1 kPa mm^2 = 1 mN), energies in mN mm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from .errors import SolverFailure
from .geometry import (
    EmbeddedPath,
    RigidPose,
    SurfaceMesh,
    TetraMesh,
    embed_point,
    rotation_about_z,
    sample_surface_points,
    signed_volumes,
)
from .seeding import STAGE_DATASET, child_rng

log = logging.getLogger("softprop.simulator")

N_FINGERS = 3
TENDONS_PER_FINGER = 4
SENSORS_PER_FINGER = 4
CHANNELS_PER_FINGER = 2

# Fraction of tendon rest length removed (added) at full channel command.
TENDON_SHORTENING = 0.25

# Cold starts ramp the command in stages of at most this channel increment;
# each stage warm-starts the next. Pure solver aid, invisible in results.
_STAGE_STEP = 0.5

_RING = 12  # angular sectors of the canonical mesh; multiple of 4 keeps the
# build exactly symmetric under 90-degree rotation, which the
# controller's direction fitting relies on.


@dataclass(frozen=True)
class MaterialParams:
    """Hyperelastic material constants plus the dataset randomization range."""

    youngs_modulus_kpa: float = 125.0
    poisson_ratio: float = 0.45
    e_range: float = 0.3  # dataset draws E scaled by uniform(1 - r, 1 + r)

    def __post_init__(self):
        if self.youngs_modulus_kpa <= 0:
            raise ValueError("MaterialParams: Young's modulus must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("MaterialParams: Poisson ratio must be in [0, 0.5)")
        if not 0.0 <= self.e_range < 1.0:
            raise ValueError("MaterialParams: e_range must be in [0, 1)")

    def lame(self):
        e, nu = self.youngs_modulus_kpa, self.poisson_ratio
        mu = e / (2.0 * (1.0 + nu))
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return mu, lam


@dataclass(frozen=True)
class ExternalForceEvent:
    """Dead load spread around a surface point with Gaussian falloff.

    The window is a half-open step interval [start, stop) used by
    trajectory generators; single solves apply the event regardless.
    """

    center: np.ndarray  # (3,) mm, finger-local
    radius_mm: float
    force_mn: np.ndarray  # (3,)
    window: tuple = (0, 1)

    def __post_init__(self):
        c = np.ascontiguousarray(self.center, dtype=np.float64).reshape(3)
        f = np.ascontiguousarray(self.force_mn, dtype=np.float64).reshape(3)
        if not (np.isfinite(c).all() and np.isfinite(f).all()):
            raise ValueError("ExternalForceEvent: non-finite fields")
        if self.radius_mm <= 0:
            raise ValueError("ExternalForceEvent: radius must be positive")
        w = (int(self.window[0]), int(self.window[1]))
        if w[1] <= w[0]:
            raise ValueError("ExternalForceEvent: empty step window")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "force_mn", f)
        object.__setattr__(self, "radius_mm", float(self.radius_mm))
        object.__setattr__(self, "window", w)

    def scaled(self, factor):
        return ExternalForceEvent(
            self.center, self.radius_mm, self.force_mn * factor, self.window
        )


@dataclass(frozen=True)
class TendonCommand:
    """Six servo channel values in [0, 1]: two per finger, three fingers."""

    u: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64).reshape(-1)
        if u.shape != (6,):
            raise ValueError(f"TendonCommand: expected 6 channels, got {u.shape}")
        if not np.isfinite(u).all() or u.min() < 0.0 or u.max() > 1.0:
            raise ValueError(f"TendonCommand: channels must lie in [0, 1], got {u}")
        object.__setattr__(self, "u", u)

    @staticmethod
    def rest():
        return TendonCommand(np.zeros(6))

    def finger(self, j):
        return self.u[2 * j : 2 * j + 2]


@dataclass(frozen=True)
class FingerModel:
    """Rest geometry, embedded tendon/sensor polylines, clamp set, material."""

    rest: TetraMesh
    surface: SurfaceMesh
    tendon_paths: tuple
    sensor_paths: tuple
    base_fixed: np.ndarray
    material: MaterialParams
    radius_mm: float
    length_mm: float
    tendon_stiffness: float = 5000.0  # mN/mm, well above the elastic scale E A / L

    def __post_init__(self):
        if len(self.tendon_paths) != TENDONS_PER_FINGER:
            raise ValueError("FingerModel: exactly 4 tendon paths required")
        if len(self.sensor_paths) != SENSORS_PER_FINGER:
            raise ValueError("FingerModel: exactly 4 sensor paths required")
        base = np.ascontiguousarray(self.base_fixed, dtype=np.int64)
        if base.size == 0:
            raise ValueError("FingerModel: base clamp set is empty")
        for p in self.tendon_paths + self.sensor_paths:
            if len(p) < 2:
                raise ValueError("FingerModel: embedded paths need at least 2 points")
        object.__setattr__(self, "base_fixed", base)
        object.__setattr__(self, "_cache_slot", [None])

    @property
    def sensor_rest_lengths(self):
        return np.array([p.length(self.rest.nodes) for p in self.sensor_paths])

    @property
    def tendon_rest_lengths(self):
        return np.array([p.length(self.rest.nodes) for p in self.tendon_paths])

    @property
    def tip_node(self):
        # Center node of the last layer in the canonical build.
        return self.rest.n_nodes - (_RING + 1)

    def solver_cache(self):
        slot = self._cache_slot
        if slot[0] is None:
            slot[0] = _SolverCache(self)
        return slot[0]


def build_canonical_finger(
    segments=18,
    radius_mm=8.0,
    length_mm=80.0,
    material=None,
    tendon_stiffness=5000.0,
):
    """Capped solid cylinder along +z with embedded tendon and sensor lines.

    Layers of (center + ring of 12) nodes; every wedge prism splits into 3
    tets with rotation-equivariant diagonals, so the mesh maps onto itself
    under 90-degree rotations about the axis. Tendons run at 0.7 r and
    angles 0/90/180/270 degrees from base plane to tip cap; sensors run at
    0.55 r and 45-degree offsets, strictly inside the volume.
    """
    if segments < 4:
        raise ValueError("build_canonical_finger: segments must be >= 4")
    if radius_mm <= 0 or length_mm <= 0:
        raise ValueError("build_canonical_finger: dimensions must be positive")
    material = material or MaterialParams()

    k = _RING
    layers = segments + 1
    dz = length_mm / segments
    angles = 2.0 * np.pi * np.arange(k) / k

    nodes = np.zeros((layers * (k + 1), 3))
    for i in range(layers):
        base = i * (k + 1)
        nodes[base] = (0.0, 0.0, i * dz)
        nodes[base + 1 : base + 1 + k, 0] = radius_mm * np.cos(angles)
        nodes[base + 1 : base + 1 + k, 1] = radius_mm * np.sin(angles)
        nodes[base + 1 : base + 1 + k, 2] = i * dz

    tets = []
    for i in range(segments):
        lo = i * (k + 1)
        hi = (i + 1) * (k + 1)
        for s in range(k):
            a = lo + 1 + s
            b = lo + 1 + (s + 1) % k
            ap = hi + 1 + s
            bp = hi + 1 + (s + 1) % k
            tets.append((lo, a, b, bp))
            tets.append((lo, a, bp, ap))
            tets.append((lo, ap, bp, hi))
    tets = np.array(tets, dtype=np.int64)

    surface_nodes, faces = _boundary_surface(nodes, tets)
    mesh = TetraMesh(nodes, tets, surface_nodes)
    surface = SurfaceMesh(nodes[surface_nodes], faces)

    def radial_path(r_frac, angle_deg, zs):
        r = r_frac * radius_mm
        th = math.radians(angle_deg)
        pts = [
            embed_point(mesh, (r * math.cos(th), r * math.sin(th), z), tol_mm=1e-6)
            for z in zs
        ]
        return EmbeddedPath.from_points(mesh, pts)

    # Interior samples sit at mid-slab heights so every segment stencil spans
    # at most two tet slabs (keeps the Newton matrix bandwidth small); the
    # endpoints still reach the base plane and the tip cap.
    tendon_z = np.concatenate(
        [[0.0], (np.arange(segments) + 0.5) * dz, [length_mm]]
    )
    tendons = tuple(radial_path(0.7, ang, tendon_z) for ang in (0, 90, 180, 270))
    sensor_z = np.linspace(0.5 * dz, length_mm - 0.5 * dz, segments)
    sensors = tuple(radial_path(0.55, ang, sensor_z) for ang in (45, 135, 225, 315))

    return FingerModel(
        rest=mesh,
        surface=surface,
        tendon_paths=tendons,
        sensor_paths=sensors,
        base_fixed=np.arange(k + 1, dtype=np.int64),
        material=material,
        radius_mm=float(radius_mm),
        length_mm=float(length_mm),
        tendon_stiffness=float(tendon_stiffness),
    )


def _boundary_surface(nodes, tets):
    """Faces used by exactly one tet, plus the sorted node set they touch."""
    # Outward-oriented faces of a positive tet (n0, n1, n2, n3).
    face_ids = np.concatenate(
        [
            tets[:, [1, 2, 3]],
            tets[:, [0, 3, 2]],
            tets[:, [0, 1, 3]],
            tets[:, [0, 2, 1]],
        ]
    )
    keys = np.sort(face_ids, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    boundary = face_ids[first[counts == 1]]
    surf_nodes = np.unique(boundary)
    remap = np.full(nodes.shape[0], -1, dtype=np.int64)
    remap[surf_nodes] = np.arange(surf_nodes.size)
    return surf_nodes, remap[boundary]


@dataclass(frozen=True)
class HandModel:
    """Three fingers (usually one shared model) mounted around a palm frame."""

    fingers: tuple
    mounts: tuple

    def __post_init__(self):
        if len(self.fingers) != N_FINGERS or len(self.mounts) != N_FINGERS:
            raise ValueError("HandModel: exactly 3 fingers and 3 mounts required")
        for m in self.mounts:
            if not isinstance(m, RigidPose):
                raise ValueError("HandModel: mounts must be RigidPose instances")

    @staticmethod
    def build_standard(
        segments=18,
        radius_mm=8.0,
        length_mm=80.0,
        material=None,
        mount_radius_mm=30.0,
        tendon_stiffness=5000.0,
    ):
        finger = build_canonical_finger(
            segments, radius_mm, length_mm, material, tendon_stiffness
        )
        mounts = []
        for j in range(N_FINGERS):
            rot = rotation_about_z(2.0 * np.pi * j / N_FINGERS)
            mounts.append(RigidPose(rot, rot @ np.array([mount_radius_mm, 0.0, 0.0])))
        return HandModel((finger,) * N_FINGERS, tuple(mounts))


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    energies: tuple  # total energy after each accepted step, first entry = start
    residual: float
    stages: int


@dataclass(frozen=True)
class FingerFrame:
    """Equilibrium of one finger: nodes, sensor lengths, and solve diagnostics."""

    nodes: np.ndarray  # (M, 3)
    sensor_lengths: np.ndarray  # (4,)
    command: np.ndarray  # (2,)
    stats: SolveStats


@dataclass(frozen=True)
class SimFrame:
    """One hand-level sample: all finger equilibria under one command."""

    command: np.ndarray  # (6,)
    nodes: np.ndarray  # (3, M, 3) finger-local
    sensor_lengths: np.ndarray  # (12,)
    forces: tuple  # per finger: tuple of applied ExternalForceEvents
    e_scales: np.ndarray  # (3,) material scale used per finger
    pose: RigidPose = None  # palm pose, set on demonstration frames

    def __post_init__(self):
        lengths = np.ascontiguousarray(self.sensor_lengths, dtype=np.float64).reshape(-1)
        if lengths.shape != (12,) or lengths.min() <= 0:
            raise ValueError("SimFrame: needs 12 positive sensor lengths")
        object.__setattr__(self, "sensor_lengths", lengths)
        object.__setattr__(
            self, "command", np.ascontiguousarray(self.command, dtype=np.float64).reshape(6)
        )
        object.__setattr__(
            self, "e_scales", np.ascontiguousarray(self.e_scales, dtype=np.float64).reshape(3)
        )

    def surface_vertices(self, finger: FingerModel, j):
        return self.nodes[j][finger.rest.surface_map]


# ---------------------------------------------------------------------------
# Solver internals.


def _skew_batch(v):
    """(T, 3) -> (T, 3, 3) cross-product matrices."""
    s = np.zeros(v.shape[:-1] + (3, 3))
    s[..., 0, 1] = -v[..., 2]
    s[..., 0, 2] = v[..., 1]
    s[..., 1, 0] = v[..., 2]
    s[..., 1, 2] = -v[..., 0]
    s[..., 2, 0] = -v[..., 1]
    s[..., 2, 1] = v[..., 0]
    return s


class _TendonCache:
    """Per-tendon constants: path interpolation and segment stencils."""

    def __init__(self, path: EmbeddedPath, dof_map, n_free):
        self.node_index = path.node_index  # (P, 4)
        self.weights = path.weights  # (P, 4)
        # Each segment's length is |sum_m WS[s, m] x[NS[s, m]]|: the stencil
        # joins the barycentric supports of its two endpoints.
        self.ns = np.concatenate([self.node_index[:-1], self.node_index[1:]], axis=1)
        self.ws = np.concatenate([-self.weights[:-1], self.weights[1:]], axis=1)
        dofs = (3 * self.ns[:, :, None] + np.arange(3)).reshape(self.ns.shape[0], 24)
        rows = dof_map[np.repeat(dofs[:, :, None], 24, axis=2).ravel()]
        cols = dof_map[np.repeat(dofs[:, None, :], 24, axis=1).ravel()]
        keep = (rows >= 0) & (cols >= 0) & (rows >= cols)
        self.h_take = np.flatnonzero(keep)
        self.h_rows = rows[keep]
        self.h_cols = cols[keep]

    def segments(self, x):
        seg = np.einsum("sm,smc->sc", self.ws, x[self.ns])
        lens = np.linalg.norm(seg, axis=1)
        return seg, lens

    def length(self, x):
        return float(self.segments(x)[1].sum())

    def grad_of_length(self, x, n_nodes):
        """(M, 3) gradient of the path length; also returns the length."""
        seg, lens = self.segments(x)
        units = seg / lens[:, None]
        contrib = self.ws[:, :, None] * units[:, None, :]  # (S, 8, 3)
        grad = np.zeros((n_nodes, 3))
        flat = self.ns.ravel()
        for c in range(3):
            grad[:, c] = np.bincount(
                flat, weights=contrib[:, :, c].ravel(), minlength=n_nodes
            )
        return float(lens.sum()), grad

    def curvature_values(self, x):
        """Banded-entry values of d2(length)/dx2, matching h_rows/h_cols."""
        seg, lens = self.segments(x)
        units = seg / lens[:, None]
        proj = (np.eye(3)[None] - units[:, :, None] * units[:, None, :]) / lens[
            :, None, None
        ]
        h = np.einsum("sm,sn,sij->sminj", self.ws, self.ws, proj)
        return h.reshape(-1)[self.h_take]


class _SolverCache:
    """Everything precomputable for Newton solves on one finger mesh."""

    def __init__(self, finger: FingerModel):
        mesh = finger.rest
        self.finger = finger
        self.rest = mesh.nodes.copy()
        self.tets = mesh.tets
        t0 = self.rest[self.tets[:, 0]]
        dm = np.stack(
            [self.rest[self.tets[:, e + 1]] - t0 for e in range(3)], axis=2
        )  # (T, 3, 3), columns are rest edges
        bm = np.linalg.inv(dm)
        self.vol = signed_volumes(self.rest, self.tets)  # (T,)
        g = np.empty((self.tets.shape[0], 4, 3))
        g[:, 1:, :] = bm
        g[:, 0, :] = -bm.sum(axis=1)
        self.shape_grad = g  # f_c = sum_n G[n, c] x_n

        n_tets = self.tets.shape[0]
        kmat = np.zeros((n_tets, 9, 12))  # vec F = K x_local, dof order 3n + i
        for c in range(3):
            for n in range(4):
                for i in range(3):
                    kmat[:, 3 * c + i, 3 * n + i] = g[:, n, c]
        self.kmat = kmat
        self.kmat_t = np.ascontiguousarray(kmat.transpose(0, 2, 1))

        self.n_nodes = mesh.n_nodes
        fixed = np.zeros(self.n_nodes, dtype=bool)
        fixed[finger.base_fixed] = True
        self.free_nodes = np.flatnonzero(~fixed)
        self.n_free = self.free_nodes.size * 3
        dof_map = np.full(self.n_nodes * 3, -1, dtype=np.int64)
        dof_map[(3 * self.free_nodes[:, None] + np.arange(3)).ravel()] = np.arange(
            self.n_free
        )
        self.dof_map = dof_map

        dofs12 = (3 * self.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        rows = dof_map[np.repeat(dofs12[:, :, None], 12, axis=2).ravel()]
        cols = dof_map[np.repeat(dofs12[:, None, :], 12, axis=1).ravel()]
        keep = (rows >= 0) & (cols >= 0) & (rows >= cols)
        self.el_take = np.flatnonzero(keep)
        el_rows = rows[keep]
        el_cols = cols[keep]

        mu, lam = finger.material.lame()
        self.mu, self.lam = mu, lam
        self.alpha = 1.0 + mu / lam
        self.psi_rest = 0.5 * mu * mu / lam  # energy offset so rest sits at 0
        self.i9 = np.eye(9)

        self.tendons = tuple(
            _TendonCache(p, dof_map, self.n_free) for p in finger.tendon_paths
        )
        self.tendon_rest = finger.tendon_rest_lengths
        self.k_tendon = finger.tendon_stiffness

        # One banded buffer holds elastic and tendon-curvature entries; the
        # scatter pattern is constant so assembly is a single bincount.
        band = max(int((el_rows - el_cols).max(initial=0)), 0)
        for t in self.tendons:
            if t.h_rows.size:
                band = max(band, int((t.h_rows - t.h_cols).max()))
        self.bandwidth = band
        flat_el = (el_rows - el_cols) * self.n_free + el_cols
        flats = [flat_el]
        for t in self.tendons:
            flats.append((t.h_rows - t.h_cols) * self.n_free + t.h_cols)
        self.band_index = np.concatenate(flats)
        self.band_size = (self.bandwidth + 1) * self.n_free

        self.surface_nodes = mesh.surface_map
        self.surface_rest = self.rest[self.surface_nodes]

        # Residual tolerance: 1e-6 of the finger's force scale E V / L.
        e_kpa = finger.material.youngs_modulus_kpa
        self.base_tol = 1e-6 * e_kpa * float(self.vol.sum()) / finger.length_mm

    # -- kinematics -------------------------------------------------------

    def deformation_gradients(self, x):
        xg = x[self.tets]  # (T, 4, 3)
        f = np.einsum("tnc,tni->tic", self.shape_grad, xg)
        c0 = np.cross(f[:, :, 1], f[:, :, 2])
        c1 = np.cross(f[:, :, 2], f[:, :, 0])
        c2 = np.cross(f[:, :, 0], f[:, :, 1])
        cof = np.stack([c0, c1, c2], axis=2)
        jdet = np.einsum("ti,ti->t", f[:, :, 0], c0)
        return f, cof, jdet

    def elastic_energy(self, x, e_scale):
        f, _, jdet = self.deformation_gradients(x)
        ic = np.einsum("tic,tic->t", f, f)
        psi = (
            0.5 * self.mu * (ic - 3.0)
            + 0.5 * self.lam * (jdet - self.alpha) ** 2
            - self.psi_rest
        )
        return e_scale * float(np.dot(self.vol, psi))

    def elastic_gradient(self, x, e_scale):
        f, cof, jdet = self.deformation_gradients(x)
        p = self.mu * f + self.lam * (jdet - self.alpha)[:, None, None] * cof
        blocks = np.einsum("t,tic,tnc->tni", self.vol * e_scale, p, self.shape_grad)
        grad = np.zeros((self.n_nodes, 3))
        flat = self.tets.ravel()
        for c in range(3):
            grad[:, c] = np.bincount(
                flat, weights=blocks[:, :, c].ravel(), minlength=self.n_nodes
            )
        return grad

    def elastic_hessian_values(self, x, e_scale):
        """Banded-entry values for the elastic Hessian (matches el_take)."""
        f, cof, jdet = self.deformation_gradients(x)
        n_tets = f.shape[0]
        vecg = cof.transpose(0, 2, 1).reshape(n_tets, 9)
        hf = self.lam * vecg[:, :, None] * vecg[:, None, :]
        hf += self.mu * self.i9
        s = self.lam * (jdet - self.alpha)
        s0 = _skew_batch(s[:, None] * f[:, :, 0])
        s1 = _skew_batch(s[:, None] * f[:, :, 1])
        s2 = _skew_batch(s[:, None] * f[:, :, 2])
        hf[:, 0:3, 3:6] -= s2
        hf[:, 3:6, 0:3] += s2
        hf[:, 0:3, 6:9] += s1
        hf[:, 6:9, 0:3] -= s1
        hf[:, 3:6, 6:9] -= s0
        hf[:, 6:9, 3:6] += s0
        blocks = np.matmul(self.kmat_t, np.matmul(hf, self.kmat))
        blocks *= (self.vol * e_scale)[:, None, None]
        return blocks.reshape(-1)[self.el_take]

    # -- tendons ----------------------------------------------------------

    def tendon_targets(self, u2):
        """Per-tendon target lengths for one finger's 2-channel command."""
        u2 = np.asarray(u2, dtype=np.float64).reshape(2)
        if u2.min() < 0.0 or u2.max() > 1.0:
            raise ValueError(f"channel command out of [0, 1]: {u2}")
        t = self.tendon_rest.copy()
        # Channel 0 drives tendons 0 (pull) and 2 (release); channel 1 drives
        # 1 (pull) and 3 (release).
        t[0] *= 1.0 - TENDON_SHORTENING * u2[0]
        t[2] *= 1.0 + TENDON_SHORTENING * u2[0]
        t[1] *= 1.0 - TENDON_SHORTENING * u2[1]
        t[3] *= 1.0 + TENDON_SHORTENING * u2[1]
        return t

    def tendon_energy(self, x, targets):
        return 0.5 * self.k_tendon * sum(
            (cache.length(x) - tgt) ** 2 for cache, tgt in zip(self.tendons, targets)
        )

    def tendon_state(self, x, targets):
        """Lengths, energy gradient (M, 3), and rank-1 direction per tendon."""
        grad = np.zeros((self.n_nodes, 3))
        directions = []
        for cache, tgt in zip(self.tendons, targets):
            length, glen = cache.grad_of_length(x, self.n_nodes)
            grad += self.k_tendon * (length - tgt) * glen
            directions.append(glen)
        return grad, directions

    def tendon_curvature_values(self, x, targets):
        """Banded values for sum_t k (L - L*) d2L/dx2 (indefinite when slack;
        the damped-Newton fallback copes, and leaving it out degrades
        convergence to a crawl)."""
        chunks = []
        for cache, tgt in zip(self.tendons, targets):
            stretch = cache.length(x) - tgt
            chunks.append(self.k_tendon * stretch * cache.curvature_values(x))
        return chunks

    def newton_system(self, x, targets, force_field, e_scale):
        """Reduced gradient and dense reduced Hessian (small meshes only).

        Materializes the banded-plus-rank-1 Newton matrix; used by tests
        to compare against finite differences and by nothing hot.
        """
        grad_full = self.elastic_gradient(x, e_scale)
        tendon_grad, directions = self.tendon_state(x, targets)
        grad_full += tendon_grad
        if force_field is not None:
            grad_full -= force_field
        free_dofs = (3 * self.free_nodes[:, None] + np.arange(3)).ravel()
        g = grad_full.reshape(-1)[free_dofs]

        data = np.concatenate(
            [self.elastic_hessian_values(x, e_scale)]
            + self.tendon_curvature_values(x, targets)
        )
        ab = np.bincount(self.band_index, weights=data, minlength=self.band_size)
        ab = ab.reshape(self.bandwidth + 1, self.n_free)
        h = np.zeros((self.n_free, self.n_free))
        for k in range(self.bandwidth + 1):
            idx = np.arange(self.n_free - k)
            h[idx + k, idx] = ab[k, : self.n_free - k]
            if k:
                h[idx, idx + k] = ab[k, : self.n_free - k]
        for vec in directions:
            v = vec.reshape(-1)[free_dofs]
            h += self.k_tendon * np.outer(v, v)
        return g, h

    # -- external forces --------------------------------------------------

    def force_field(self, events):
        """Per-node dead-load forces (M, 3) from Gaussian surface falloff."""
        field_ = np.zeros((self.n_nodes, 3))
        for ev in events:
            d2 = ((self.surface_rest - ev.center) ** 2).sum(axis=1)
            sigma = 0.5 * ev.radius_mm
            w = np.exp(-0.5 * d2 / (sigma * sigma))
            total = w.sum()
            if total <= 1e-12:
                raise ValueError(
                    "force event too far from the surface: no node receives load"
                )
            field_[self.surface_nodes] += (w / total)[:, None] * ev.force_mn
        return field_

    # -- totals ------------------------------------------------------------

    def total_energy(self, x, targets, force_field, e_scale):
        e = self.elastic_energy(x, e_scale) + self.tendon_energy(x, targets)
        if force_field is not None:
            e -= float(np.einsum("ni,ni->", force_field, x))
        return e


def _newton_solve(cache: _SolverCache, targets, force_field, e_scale, x0, max_iters):
    """Damped Newton with Armijo backtracking; returns (x, stats).

    The Newton matrix is C + sum_t k v_t v_t^T with C banded (elastic +
    tendon curvature + damping); C gets a banded LU and the tendon rank-1
    terms enter through the Woodbury identity. Slack tendons make C
    indefinite, so instead of forcing definiteness (which over-damps and
    crawls) the step is accepted whenever it is a descent direction, with
    diagonal damping escalated otherwise.
    """
    x = cache.rest.copy() if x0 is None else np.array(x0, dtype=np.float64)
    x[cache.finger.base_fixed] = cache.rest[cache.finger.base_fixed]
    tol = cache.base_tol * e_scale
    free = cache.free_nodes
    nf = cache.n_free
    band = cache.bandwidth
    dof_rows = (3 * free[:, None] + np.arange(3)).ravel()

    energy = cache.total_energy(x, targets, force_field, e_scale)
    energies = [energy]
    residual = math.inf

    for it in range(max_iters):
        grad_full = cache.elastic_gradient(x, e_scale)
        tendon_grad, directions = cache.tendon_state(x, targets)
        grad_full += tendon_grad
        if force_field is not None:
            grad_full -= force_field
        g = grad_full[free].ravel()
        residual = float(np.linalg.norm(g))
        if residual <= tol:
            return x, SolveStats(it, tuple(energies), residual, 1)

        el_values = cache.elastic_hessian_values(x, e_scale)
        td_values = cache.tendon_curvature_values(x, targets)
        data = np.concatenate([el_values] + td_values)
        ab_flat = np.bincount(
            cache.band_index, weights=data, minlength=cache.band_size
        )
        low = ab_flat.reshape(band + 1, nf)
        # Mirror the lower-banded storage into general (2b+1, nf) LU form.
        ab = np.zeros((2 * band + 1, nf))
        ab[band:] = low
        for k in range(1, band + 1):
            ab[band - k, k:] = low[k, : nf - k]
        diag_scale = max(float(np.abs(low[0]).mean()), 1e-12)
        vmat = np.stack([d.ravel()[dof_rows] for d in directions], axis=1)  # (nf, 4)
        rhs = np.concatenate([-g[:, None], vmat], axis=1)

        tau = 0.0
        step_taken = False
        for _ in range(24):
            abt = ab.copy()
            abt[band] += tau * diag_scale
            try:
                sol = solve_banded((band, band), abt, rhs)
            except LinAlgError:
                tau = 1e-7 if tau == 0.0 else tau * 8.0
                continue
            core = np.eye(4) / cache.k_tendon + vmat.T @ sol[:, 1:]
            coeff = np.linalg.solve(core, vmat.T @ sol[:, 0])
            d = sol[:, 0] - sol[:, 1:] @ coeff
            gd = float(g @ d)
            if not np.isfinite(d).all() or gd >= 0.0:
                tau = 1e-7 if tau == 0.0 else tau * 8.0
                continue
            alpha = 1.0
            for _ in range(30):
                xn = x.copy()
                xn[free] += alpha * d.reshape(-1, 3)
                en = cache.total_energy(xn, targets, force_field, e_scale)
                if np.isfinite(en) and en <= energy + 1e-4 * alpha * gd:
                    x, energy = xn, en
                    energies.append(energy)
                    step_taken = True
                    break
                alpha *= 0.5
            if step_taken:
                break
            tau = 1e-7 if tau == 0.0 else tau * 8.0
        if not step_taken:
            raise SolverFailure(
                f"no descent step found at iteration {it} (residual {residual:.3e} mN)",
                residual=residual,
                step=it,
            )

    raise SolverFailure(
        f"Newton did not reach tolerance {tol:.3e} mN in {max_iters} iterations "
        f"(residual {residual:.3e} mN)",
        residual=residual,
        step=max_iters,
    )


def solve_equilibrium(
    finger: FingerModel,
    u2,
    forces=(),
    e_scale=1.0,
    x0=None,
    max_iters=100,
):
    """Static equilibrium of one finger under a 2-channel command and forces.

    Large cold-start commands are ramped in stages (each warm-starting the
    next) purely as a solver aid; the returned state is the equilibrium of
    the full command. Returns a FingerFrame.
    """
    if e_scale <= 0:
        raise ValueError("solve_equilibrium: e_scale must be positive")
    cache = finger.solver_cache()
    u2 = np.asarray(u2, dtype=np.float64).reshape(2)
    force_field = cache.force_field(forces) if forces else None

    stages = 1
    if x0 is None:
        stages = max(1, int(math.ceil(float(u2.max()) / _STAGE_STEP)))
    x = x0
    total_iters = 0
    energies = ()
    residual = 0.0
    for s in range(1, stages + 1):
        targets = cache.tendon_targets(u2 * (s / stages))
        x, stats = _newton_solve(cache, targets, force_field, e_scale, x, max_iters)
        total_iters += stats.iterations
        energies = energies + stats.energies
        residual = stats.residual

    lengths = np.array([p.length(x) for p in finger.sensor_paths])
    return FingerFrame(
        nodes=x,
        sensor_lengths=lengths,
        command=u2.copy(),
        stats=SolveStats(total_iters, energies, residual, stages),
    )


def solve_hand(
    hand: HandModel,
    command,
    forces_per_finger=((), (), ()),
    e_scales=(1.0, 1.0, 1.0),
    x0s=None,
    pose=None,
    max_iters=100,
):
    """Solve all three fingers; returns (SimFrame, [FingerFrame x3])."""
    command = command.u if isinstance(command, TendonCommand) else np.asarray(command, float)
    command = TendonCommand(command).u  # validate range
    nodes = []
    lengths = []
    frames = []
    for j in range(N_FINGERS):
        frame = solve_equilibrium(
            hand.fingers[j],
            command[2 * j : 2 * j + 2],
            forces=forces_per_finger[j],
            e_scale=float(e_scales[j]),
            x0=None if x0s is None else x0s[j],
            max_iters=max_iters,
        )
        frames.append(frame)
        nodes.append(frame.nodes)
        lengths.append(frame.sensor_lengths)
    return SimFrame(
        command=command,
        nodes=np.stack(nodes),
        sensor_lengths=np.concatenate(lengths),
        forces=tuple(tuple(f) for f in forces_per_finger),
        e_scales=np.asarray(e_scales, dtype=np.float64),
        pose=pose,
    ), frames


# ---------------------------------------------------------------------------
# Dataset generation.


@dataclass(frozen=True)
class DatasetConfig:
    """Randomized-frame generation settings (independent equilibria)."""

    frames: int = 2000
    force_prob: float = 0.5  # chance each finger sees one contact-like event
    force_mag_mn: tuple = (10.0, 60.0)
    force_radius_frac: tuple = (0.25, 0.45)  # of finger length; floor 0.25
    randomize_material: bool = True
    max_command: float = 1.0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("DatasetConfig: frames must be >= 1")
        if not 0.0 <= self.force_prob <= 1.0:
            raise ValueError("DatasetConfig: force_prob must be in [0, 1]")
        if self.force_radius_frac[0] < 0.25:
            raise ValueError(
                "DatasetConfig: force radius below 25% of finger length gives "
                "non-smooth dents; raise force_radius_frac"
            )
        if not 0.0 < self.max_command <= 1.0:
            raise ValueError("DatasetConfig: max_command must be in (0, 1]")


def _sample_force_event(rng, finger: FingerModel, cfg: DatasetConfig, window=(0, 1)):
    center = sample_surface_points(finger.surface, 1, rng)[0]
    radius = rng.uniform(*cfg.force_radius_frac) * finger.length_mm
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    magnitude = rng.uniform(*cfg.force_mag_mn)
    return ExternalForceEvent(center, radius, magnitude * direction, window)


def generate_dataset(hand: HandModel, cfg: DatasetConfig, seed):
    """Independent randomized frames; deterministic given the root seed.

    Each frame draws from its own (seed, STAGE_DATASET, index) stream, so
    frames could be solved in any order or in parallel without changing
    the result. Solver failures skip the frame with a warning; they are
    never silently included.
    """
    frames = []
    for i in range(cfg.frames):
        rng = child_rng(seed, STAGE_DATASET, i)
        command = rng.uniform(0.0, cfg.max_command, size=6)
        e_scales = np.ones(3)
        forces = []
        for j in range(N_FINGERS):
            if cfg.randomize_material:
                r = hand.fingers[j].material.e_range
                e_scales[j] = rng.uniform(1.0 - r, 1.0 + r)
            if rng.random() < cfg.force_prob:
                forces.append((_sample_force_event(rng, hand.fingers[j], cfg),))
            else:
                forces.append(())
        try:
            frame, _ = solve_hand(hand, command, tuple(forces), e_scales)
        except SolverFailure as err:
            log.warning("frame %d skipped: %s", i, err)
            continue
        frames.append(frame)
    if not frames:
        raise SolverFailure("every frame in the dataset failed to solve")
    return frames


def rollout_commands(hand: HandModel, commands, max_iters=100):
    """Solve a command schedule sequentially with warm starts.

    commands: iterable of (6,) tendon commands. Returns the SimFrame list;
    useful for recording tendon-reachable reference trajectories.
    """
    frames = []
    warm = None
    for t, command in enumerate(commands):
        try:
            frame, finger_frames = solve_hand(
                hand, command, x0s=warm, max_iters=max_iters
            )
        except SolverFailure as err:
            raise SolverFailure(
                f"rollout solve failed at step {t}: {err}",
                residual=err.residual,
                step=t,
            ) from err
        warm = [ff.nodes for ff in finger_frames]
        frames.append(frame)
    if not frames:
        raise ValueError("rollout_commands: empty command schedule")
    return frames


# ---------------------------------------------------------------------------
# Demonstrations: externally forced trajectories with u = 0 throughout.


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class Demonstration:
    """Forced trajectory standing in for a human deforming the fingers."""

    frames: tuple  # SimFrames with pose set
    ramp_steps: int
    seed: int = 0  # recorded for downstream sensor-noise synthesis

    def __len__(self):
        return len(self.frames)


def collect_demonstration(
    hand: HandModel,
    script,
    pose_script=None,
    seed=0,
    steps=None,
    ramp_steps=10,
):
    """Roll a schedule of force events (u = 0) into a pose-tagged trajectory.

    script: iterable of (finger_index, ExternalForceEvent); each event's
    force ramps in with a smoothstep over ramp_steps from its window start,
    so deformations drift smoothly toward equilibrium instead of jumping.
    pose_script: optional per-step palm RigidPose list (default identity).
    The seed is recorded for downstream sensor-noise synthesis; the solve
    itself is deterministic.
    """
    script = tuple(script)
    for j, _ in script:
        if not 0 <= j < N_FINGERS:
            raise ValueError(f"script references finger {j}")
    if steps is None:
        if pose_script is not None:
            steps = len(pose_script)
        elif script:
            steps = max(ev.window[1] for _, ev in script)
        else:
            raise ValueError("collect_demonstration: need steps, poses, or events")
    if pose_script is not None and len(pose_script) != steps:
        raise ValueError("pose_script length must equal the step count")
    if steps < 1:
        raise ValueError("collect_demonstration: steps must be >= 1")

    frames = []
    warm = [None] * N_FINGERS
    for t in range(steps):
        forces = [[] for _ in range(N_FINGERS)]
        for j, ev in script:
            if ev.window[0] <= t < ev.window[1]:
                scale = float(smoothstep((t - ev.window[0] + 1) / ramp_steps))
                forces[j].append(ev.scaled(scale))
        pose = pose_script[t] if pose_script is not None else RigidPose.identity()
        try:
            frame, finger_frames = solve_hand(
                hand,
                np.zeros(6),
                tuple(tuple(f) for f in forces),
                x0s=warm,
                pose=pose,
            )
        except SolverFailure as err:
            raise SolverFailure(
                f"demonstration solve failed at step {t}: {err}",
                residual=err.residual,
                step=t,
            ) from err
        warm = [ff.nodes for ff in finger_frames]
        frames.append(frame)
    return Demonstration(tuple(frames), ramp_steps, int(seed))
