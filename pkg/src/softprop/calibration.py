"""Domain alignment between the training simulator and an "observed" sensor
domain.

An observed domain differs from the training domain in two ways: each of
the 12 strain sensors responds with its own slope per sign branch (24
correction factors), and each finger is mounted with a small angular
offset about its local y axis (3 angles). Neither is differentiable
through the measurement path, so both are fit together by CMA-ES: sample
candidate parameter vectors, score each by the summed unidirectional
Chamfer distance between the observed point clouds and the shape model's
predicted surfaces, and adapt the search distribution from the ranking.

The CMA-ES here is the standard (mu/mu_w, lambda) strategy with weighted
recombination, cumulative step-size adaptation, and rank-one plus
rank-mu covariance updates, written against plain numpy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, OptimizationError
from .estimator import ShapeModel, predict_displacements
from .geometry import (
    RigidPose,
    as_cloud,
    chamfer_ucd,
    mean_nn_distance,
    rotation_about_y,
    sample_surface_points,
)
from .seeding import STAGE_CALIBRATION, STAGE_CALSET, child_rng
from .sensors import (
    N_SENSORS,
    ResistanceFrame,
    SensorCalibration,
    resistance_array_from_strain,
    strain_array_from_resistance,
)
from .simulator import N_FINGERS, HandModel

N_ALIGN_PARAMS = 2 * N_SENSORS + N_FINGERS  # 24 correction factors + 3 angles


# ---------------------------------------------------------------------------
# CMA-ES.


@dataclass(frozen=True)
class CmaConfig:
    """Search settings; population sizing defaults follow the standard rule."""

    sigma0: float = 0.3
    mean0: np.ndarray = None  # None = zeros(dim)
    popsize: int = 0  # 0 = 4 + floor(3 ln dim)
    parents: int = 0  # 0 = popsize // 2
    max_evals: int = 10000
    target_loss: float = -math.inf

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("CmaConfig: sigma0 must be positive")
        if self.max_evals < 1:
            raise ValueError("CmaConfig: max_evals must be >= 1")
        if self.popsize and self.popsize < 4:
            raise ValueError("CmaConfig: population must be >= 4")
        if self.parents and self.popsize and not 1 <= self.parents <= self.popsize:
            raise ValueError("CmaConfig: parents must be in [1, popsize]")
        if self.mean0 is not None:
            mean0 = np.ascontiguousarray(self.mean0, dtype=np.float64).reshape(-1)
            if not np.isfinite(mean0).all():
                raise ValueError("CmaConfig: mean0 must be finite")
            object.__setattr__(self, "mean0", mean0)


def _safe_loss(objective, x):
    """Objective wrapper: errors and non-finite values become +inf."""
    try:
        value = float(objective(x))
    except Exception:
        return math.inf
    return value if math.isfinite(value) else math.inf


def cma_es_minimize(objective, dim, cfg: CmaConfig, seed):
    """Minimize a black-box function; returns (best x, best loss, history).

    Deterministic per seed. The initial mean is evaluated first, so the
    result is never worse than the starting point. Candidates whose
    objective raises or returns a non-finite value count as +inf; a
    generation where every candidate does so aborts the run.
    """
    if dim < 1:
        raise ValueError("cma_es_minimize: dim must be >= 1")
    n = int(dim)
    lam = cfg.popsize or 4 + int(3 * math.log(n))
    if lam < 4:
        raise ValueError("cma_es_minimize: population must be >= 4")
    mu = cfg.parents or lam // 2

    # Selection: log-decreasing recombination weights over the mu parents.
    weights = np.log(lam / 2 + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mueff = 1.0 / float(weights @ weights)

    # Adaptation constants (standard settings for the given dim).
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 2 * mueff / lam + 0.3 + cs

    if cfg.mean0 is None:
        mean = np.zeros(n)
    else:
        if cfg.mean0.shape != (n,):
            raise ValueError(
                f"cma_es_minimize: mean0 has {cfg.mean0.shape[0]} entries for dim {n}"
            )
        mean = cfg.mean0.copy()
    sigma = float(cfg.sigma0)
    cov = np.eye(n)
    p_sigma = np.zeros(n)
    p_cov = np.zeros(n)

    rng = child_rng(seed, STAGE_CALIBRATION, 0)
    best_x = mean.copy()
    best_f = _safe_loss(objective, mean)
    evals = 1
    generation = 0
    history = []

    while evals < cfg.max_evals and best_f > cfg.target_loss:
        # Re-condition: keep the sampler positive definite.
        eigvals, basis = np.linalg.eigh(0.5 * (cov + cov.T))
        eigvals = np.maximum(eigvals, 1e-14)
        scales = np.sqrt(eigvals)

        z = rng.standard_normal((lam, n))
        steps = (z * scales) @ basis.T
        candidates = mean + sigma * steps
        losses = np.array([_safe_loss(objective, c) for c in candidates])
        evals += lam
        generation += 1
        if np.isinf(losses).all():
            raise OptimizationError(
                f"every candidate failed at generation {generation}"
            )

        order = np.argsort(losses, kind="stable")
        if losses[order[0]] < best_f:
            best_f = float(losses[order[0]])
            best_x = candidates[order[0]].copy()

        old_mean = mean
        parents = candidates[order[:mu]]
        mean = weights @ parents

        # Cumulative step-size adaptation.
        shift = (mean - old_mean) / sigma
        whitened = basis @ ((basis.T @ shift) / scales)
        p_sigma = (1 - cs) * p_sigma + math.sqrt(cs * (2 - cs) * mueff) * whitened
        ps_norm2 = float(p_sigma @ p_sigma)
        h_sigma = ps_norm2 / n / (1 - (1 - cs) ** (2 * generation)) < 2 + 4 / (n + 1)
        p_cov = (1 - cc) * p_cov + h_sigma * math.sqrt(cc * (2 - cc) * mueff) * shift

        # Rank-one + rank-mu covariance update.
        c1a = c1 * (1 - (1 - h_sigma) * cc * (2 - cc))
        deltas = (parents - old_mean) / sigma
        cov = (
            (1 - c1a - cmu) * cov
            + c1 * np.outer(p_cov, p_cov)
            + cmu * (deltas.T * weights) @ deltas
        )
        sigma *= math.exp(min(1.0, (cs / damps) * (ps_norm2 / n - 1) / 2))

        history.append(
            {
                "generation": generation,
                "evaluations": evals,
                "gen_best": float(losses[order[0]]),
                "best_so_far": best_f,
                "sigma": sigma,
            }
        )

    return best_x, best_f, tuple(history)


# ---------------------------------------------------------------------------
# Alignment parameters and the calibration data they are fit against.


@dataclass(frozen=True)
class AlignParams:
    """24 sensor correction factors plus 3 per-finger mount angles.

    kappa packs the 12 tension-branch factors first, then the 12
    compression-branch factors; phi is radians about each finger's local
    y axis.
    """

    kappa: np.ndarray  # (24,) positive
    phi: np.ndarray  # (3,) in [-pi, pi]

    def __post_init__(self):
        kappa = np.ascontiguousarray(self.kappa, dtype=np.float64).reshape(-1)
        phi = np.ascontiguousarray(self.phi, dtype=np.float64).reshape(-1)
        if kappa.shape != (2 * N_SENSORS,):
            raise ValueError(f"AlignParams: kappa needs {2 * N_SENSORS} entries")
        if phi.shape != (N_FINGERS,):
            raise ValueError(f"AlignParams: phi needs {N_FINGERS} entries")
        if not np.isfinite(kappa).all() or kappa.min() <= 0:
            raise ValueError("AlignParams: correction factors must be positive")
        if not np.isfinite(phi).all() or np.abs(phi).max() > math.pi:
            raise ValueError("AlignParams: angles must lie in [-pi, pi]")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "phi", phi)

    @staticmethod
    def identity():
        """Unit correction factors, zero mount offsets."""
        return AlignParams(np.ones(2 * N_SENSORS), np.zeros(N_FINGERS))

    def vector(self):
        return np.concatenate([self.kappa, self.phi])

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.shape != (N_ALIGN_PARAMS,):
            raise ValueError(f"AlignParams: vector needs {N_ALIGN_PARAMS} entries")
        phi = np.mod(theta[2 * N_SENSORS :] + math.pi, 2 * math.pi) - math.pi
        return cls(theta[: 2 * N_SENSORS], phi)

    def sensor_calibration(self, r0):
        return SensorCalibration(r0, self.kappa[:N_SENSORS], self.kappa[N_SENSORS:])


@dataclass(frozen=True)
class CalibrationSample:
    """One observation: a resistance reading, a point cloud, mount poses."""

    resistances: ResistanceFrame
    cloud: np.ndarray  # (P, 3) observed points in the hand frame
    mounts: tuple  # one RigidPose per finger

    def __post_init__(self):
        cloud = as_cloud(self.cloud, "CalibrationSample.cloud")
        if len(self.mounts) != N_FINGERS:
            raise ValueError(f"CalibrationSample: needs {N_FINGERS} mount poses")
        object.__setattr__(self, "cloud", cloud)
        object.__setattr__(self, "mounts", tuple(self.mounts))


@dataclass(frozen=True)
class CalibrationSet:
    """Observation list; the baseline sample's resistances define R0."""

    samples: tuple
    baseline_index: int = 0

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ValueError("CalibrationSet: needs at least one sample")
        if not 0 <= self.baseline_index < len(samples):
            raise ValueError("CalibrationSet: baseline_index out of range")
        object.__setattr__(self, "samples", samples)

    @property
    def r0(self):
        return self.samples[self.baseline_index].resistances.r

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# Objective and alignment.


def _finger_poses(mounts, phi):
    """Mount pose combined with the candidate angular offset per finger."""
    return [
        mounts[j].compose(RigidPose(rotation_about_y(phi[j]), np.zeros(3)))
        for j in range(N_FINGERS)
    ]


def predict_observed_cloud(model: ShapeModel, hand: HandModel, params: AlignParams,
                           r0, resistances, mounts):
    """Posed hand-frame surface prediction for one resistance reading."""
    cal = params.sensor_calibration(r0)
    strains = strain_array_from_resistance(np.asarray(resistances), cal)
    poses = _finger_poses(mounts, params.phi)
    clouds = []
    for j, finger in enumerate(hand.fingers):
        disp = predict_displacements(
            model, strains[4 * j : 4 * j + 4], finger.surface.vertices
        )
        clouds.append(poses[j].apply(finger.surface.vertices + disp))
    return np.concatenate(clouds)


def alignment_loss(model: ShapeModel, hand: HandModel, calset: CalibrationSet,
                   params: AlignParams):
    """Summed unidirectional Chamfer distance over all samples (mm^2).

    Each sample contributes chamfer_ucd(observed cloud, predicted cloud),
    the predicted cloud being the union of the three posed finger
    surfaces under the candidate correction factors and mount angles.
    """
    r0 = calset.r0
    cal = params.sensor_calibration(r0)
    readings = np.stack([s.resistances.r for s in calset.samples])
    strains = strain_array_from_resistance(readings, cal)  # (S, 12)

    # One decoder pass per finger over every sample.
    fields = [
        predict_displacements(
            model, strains[:, 4 * j : 4 * j + 4], hand.fingers[j].surface.vertices
        )
        for j in range(N_FINGERS)
    ]
    total = 0.0
    for i, sample in enumerate(calset.samples):
        poses = _finger_poses(sample.mounts, params.phi)
        predicted = np.concatenate(
            [
                poses[j].apply(hand.fingers[j].surface.vertices + fields[j][i])
                for j in range(N_FINGERS)
            ]
        )
        total += chamfer_ucd(sample.cloud, predicted)
    return total


@dataclass(frozen=True)
class AlignResult:
    """Best parameters with their loss and the per-generation history."""

    params: AlignParams
    loss: float
    history: tuple


def align_domains(model: ShapeModel, hand: HandModel, calset: CalibrationSet,
                  cfg: CmaConfig = None, seed=0):
    """Fit correction factors and mount angles to the observed clouds.

    The search starts at the identity correction (unit factors, zero
    angles); candidates with a non-positive factor score +inf and are
    never selected. Returns an AlignResult whose loss is never above the
    identity-initialization loss.
    """
    if cfg is None:
        cfg = CmaConfig(sigma0=0.3, max_evals=2600)
    if cfg.mean0 is None:
        cfg = CmaConfig(
            sigma0=cfg.sigma0,
            mean0=AlignParams.identity().vector(),
            popsize=cfg.popsize,
            parents=cfg.parents,
            max_evals=cfg.max_evals,
            target_loss=cfg.target_loss,
        )

    def objective(theta):
        if theta[: 2 * N_SENSORS].min() <= 0.0:
            return math.inf
        return alignment_loss(model, hand, calset, AlignParams.from_vector(theta))

    best_theta, best_loss, history = cma_es_minimize(
        objective, N_ALIGN_PARAMS, cfg, seed
    )
    return AlignResult(AlignParams.from_vector(best_theta), float(best_loss), history)


def alignment_report(model: ShapeModel, hand: HandModel, calset: CalibrationSet,
                     before: AlignParams, result: AlignResult):
    """Before/after comparison plus the optimizer's convergence curve."""

    def per_sample_nn(params):
        r0 = calset.r0
        cal = params.sensor_calibration(r0)
        readings = np.stack([s.resistances.r for s in calset.samples])
        strains = strain_array_from_resistance(readings, cal)
        fields = [
            predict_displacements(
                model, strains[:, 4 * j : 4 * j + 4], hand.fingers[j].surface.vertices
            )
            for j in range(N_FINGERS)
        ]
        values = []
        for i, sample in enumerate(calset.samples):
            poses = _finger_poses(sample.mounts, params.phi)
            predicted = np.concatenate(
                [
                    poses[j].apply(hand.fingers[j].surface.vertices + fields[j][i])
                    for j in range(N_FINGERS)
                ]
            )
            values.append(float(mean_nn_distance(sample.cloud, predicted)))
        return values

    before_nn = per_sample_nn(before)
    after_nn = per_sample_nn(result.params)
    return {
        "metric": "summed_ucd_mm2",
        "before_loss": float(alignment_loss(model, hand, calset, before)),
        "after_loss": float(result.loss),
        "loss_curve": [h["best_so_far"] for h in result.history],
        "generations": len(result.history),
        "evaluations": result.history[-1]["evaluations"] if result.history else 1,
        "before_mean_nn_mm": before_nn,
        "after_mean_nn_mm": after_nn,
        "kappa": result.params.kappa.tolist(),
        "phi": result.params.phi.tolist(),
    }


# ---------------------------------------------------------------------------
# Synthesizing an "observed" domain from simulated frames.


def synthesize_calibration_set(hand: HandModel, frames, true_cal: SensorCalibration,
                               phi_true, seed, points_per_finger=500,
                               crop_normal=None, crop_offset=0.0):
    """Generate clouds + resistances as a planted ground-truth domain.

    Resistances come from the forward sensor model under `true_cal`
    (noise-free); clouds are uniform-by-area samples of each deformed
    finger surface, posed by the hand mounts composed with the planted
    `phi_true` offsets. Pass the rest frame first so the baseline reading
    is meaningful. `crop_normal` keeps only points with
    dot(p, crop_normal) >= crop_offset, emulating a one-sided camera.
    """
    phi_true = np.asarray(phi_true, dtype=np.float64).reshape(N_FINGERS)
    rest_lengths = np.concatenate([f.sensor_rest_lengths for f in hand.fingers])
    poses = _finger_poses(hand.mounts, phi_true)
    samples = []
    for i, frame in enumerate(frames):
        rng = child_rng(seed, STAGE_CALSET, i)
        strains = frame.sensor_lengths / rest_lengths - 1.0
        resistances = resistance_array_from_strain(strains, true_cal)
        parts = []
        for j, finger in enumerate(hand.fingers):
            deformed = finger.surface.with_vertices(frame.surface_vertices(finger, j))
            pts = sample_surface_points(deformed, points_per_finger, rng)
            parts.append(poses[j].apply(pts))
        cloud = np.concatenate(parts)
        if crop_normal is not None:
            normal = np.asarray(crop_normal, dtype=np.float64).reshape(3)
            keep = cloud @ normal >= crop_offset
            if not keep.any():
                raise ValueError(
                    f"synthesize_calibration_set: crop removed every point of "
                    f"sample {i}"
                )
            cloud = cloud[keep]
        samples.append(
            CalibrationSample(
                ResistanceFrame(resistances, timestamp=float(i)),
                cloud,
                tuple(hand.mounts),
            )
        )
    return CalibrationSet(tuple(samples), baseline_index=0)


# ---------------------------------------------------------------------------
# On-disk form: manifest + XYZ clouds + resistance CSV.

MANIFEST_FILE = "manifest.json"
RESISTANCE_FILE = "resistances.csv"
CALSET_FORMAT = "calset/1"


def _pose_doc(pose: RigidPose):
    return {
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
    }


def _pose_from_doc(doc):
    return RigidPose(np.array(doc["rotation"]), np.array(doc["translation"]))


def save_calibration_set(directory, calset: CalibrationSet):
    """Write manifest.json, resistances.csv, and one .xyz cloud per sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cloud_files = []
    for i, sample in enumerate(calset.samples):
        name = f"cloud_{i:04d}.xyz"
        np.savetxt(directory / name, sample.cloud, fmt="%.17g")
        cloud_files.append(name)
    with open(directory / RESISTANCE_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + [f"r{i}" for i in range(N_SENSORS)])
        for sample in calset.samples:
            writer.writerow(
                [repr(float(sample.resistances.timestamp))]
                + [repr(float(v)) for v in sample.resistances.r]
            )
    manifest = {
        "format": CALSET_FORMAT,
        "samples": len(calset.samples),
        "baseline_index": calset.baseline_index,
        "cloud_files": cloud_files,
        "resistance_file": RESISTANCE_FILE,
        "mounts": [
            [_pose_doc(p) for p in sample.mounts] for sample in calset.samples
        ],
    }
    with open(directory / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_calibration_set(directory, producer="calibrate"):
    """Read a calibration-set directory written by save_calibration_set."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.is_file():
        raise MissingArtifactError(manifest_path, producer=producer)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CALSET_FORMAT:
        raise ValueError(
            f"{manifest_path}: unsupported calibration-set format "
            f"{manifest.get('format')!r}"
        )
    resistance_path = directory / manifest["resistance_file"]
    if not resistance_path.is_file():
        raise MissingArtifactError(resistance_path, producer=producer)
    with open(resistance_path, newline="") as fh:
        rows = list(csv.reader(fh))
    readings = [
        ResistanceFrame(np.array([float(v) for v in row[1:]]), float(row[0]))
        for row in rows[1:]
    ]
    if len(readings) != manifest["samples"]:
        raise ValueError(
            f"{resistance_path}: {len(readings)} rows for "
            f"{manifest['samples']} samples"
        )
    samples = []
    for i in range(manifest["samples"]):
        cloud_path = directory / manifest["cloud_files"][i]
        if not cloud_path.is_file():
            raise MissingArtifactError(cloud_path, producer=producer)
        cloud = np.loadtxt(cloud_path).reshape(-1, 3)
        mounts = tuple(_pose_from_doc(d) for d in manifest["mounts"][i])
        samples.append(CalibrationSample(readings[i], cloud, mounts))
    return CalibrationSet(tuple(samples), baseline_index=manifest["baseline_index"])
