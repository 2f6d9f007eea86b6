"""Resistance-strain sensor physics.

An incompressible conductive channel of length L and volume V has
resistance proportional to L^2/V, so R/R0 = (L/L0)^2 regardless of the
material's conductivity. Imperfect fabrication breaks the exact square
law; per-sensor correction factors kappa absorb that, with separate
values for tension (positive strain) and compression so the two response
slopes can differ. kappa_pos = kappa_neg = 1 is the ideal sensor.

Forward synthesis (strain -> resistance) and inverse recovery
(resistance -> strain) are exact inverses of each other when noise is
off. Strains are engineering strain (L - L0)/L0, resistances are ohms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError

import json

N_SENSORS = 12


def _vec12(values, name):
    arr = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (N_SENSORS,):
        raise ValueError(f"{name}: expected {N_SENSORS} values, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite entries")
    return arr


@dataclass(frozen=True)
class StrainVector:
    """Engineering strains for the hand's 12 sensors; each must exceed -1."""

    s: np.ndarray

    def __post_init__(self):
        s = _vec12(self.s, "StrainVector")
        if s.min() <= -1.0:
            raise ValueError(f"StrainVector: strain {s.min()} implies nonpositive length")
        object.__setattr__(self, "s", s)


@dataclass(frozen=True)
class ResistanceFrame:
    """One 12-channel resistance reading (ohms) with its capture time (s)."""

    r: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        r = _vec12(self.r, "ResistanceFrame")
        if r.min() <= 0.0:
            raise ValueError(f"ResistanceFrame: nonpositive resistance {r.min()}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class SensorCalibration:
    """Baselines plus sign-split correction factors for all 12 sensors.

    rho carries per-sensor conductivity scale for forward synthesis
    bookkeeping only; the resistance ratio R/R0 never depends on it.
    """

    r0: np.ndarray
    kappa_pos: np.ndarray
    kappa_neg: np.ndarray
    rho: np.ndarray = field(default=None)

    def __post_init__(self):
        r0 = _vec12(self.r0, "SensorCalibration.r0")
        kp = _vec12(self.kappa_pos, "SensorCalibration.kappa_pos")
        kn = _vec12(self.kappa_neg, "SensorCalibration.kappa_neg")
        rho = (
            np.ones(N_SENSORS)
            if self.rho is None
            else _vec12(self.rho, "SensorCalibration.rho")
        )
        if r0.min() <= 0.0:
            raise ValueError("SensorCalibration: baseline resistances must be positive")
        if kp.min() <= 0.0 or kn.min() <= 0.0:
            raise ValueError("SensorCalibration: correction factors must be positive")
        if rho.min() <= 0.0:
            raise ValueError("SensorCalibration: conductivity factors must be positive")
        object.__setattr__(self, "r0", r0)
        object.__setattr__(self, "kappa_pos", kp)
        object.__setattr__(self, "kappa_neg", kn)
        object.__setattr__(self, "rho", rho)

    @staticmethod
    def ideal(r0=100.0):
        """Unit correction factors: the exact square-law sensor."""
        return SensorCalibration(
            np.full(N_SENSORS, float(r0)), np.ones(N_SENSORS), np.ones(N_SENSORS)
        )


def resistance_array_from_strain(strains, cal: SensorCalibration, rng=None, noise_sigma=0.005):
    """Vectorized forward model over (..., 12) strain arrays.

    R = R0 (1 + s / kappa_branch)^2 with the branch picked by sign(s).
    With rng given, applies multiplicative Gaussian noise (1 + sigma z).
    """
    s = np.asarray(strains, dtype=np.float64)
    if s.shape[-1] != N_SENSORS:
        raise ValueError(f"strain array last axis must be {N_SENSORS}, got {s.shape}")
    kappa = np.where(s >= 0.0, cal.kappa_pos, cal.kappa_neg)
    base = 1.0 + s / kappa
    if base.min() <= 0.0:
        bad = np.argwhere(base <= 0.0)
        raise ValueError(
            f"strain at or below -kappa for sensor(s) {bad[:, -1].tolist()}: "
            "resistance would be nonpositive"
        )
    r = cal.r0 * base * base
    if rng is not None and noise_sigma > 0.0:
        rng = np.random.default_rng(rng)
        r = r * (1.0 + noise_sigma * rng.standard_normal(r.shape))
        if r.min() <= 0.0:
            raise ValueError("noise drove a resistance nonpositive; lower noise_sigma")
    return r


def strain_array_from_resistance(resistances, cal: SensorCalibration):
    """Vectorized inverse model over (..., 12) resistance arrays.

    dR = sqrt(R/R0) - 1; strain = dR * kappa_pos if dR >= 0 else dR * kappa_neg.
    """
    r = np.asarray(resistances, dtype=np.float64)
    if r.shape[-1] != N_SENSORS:
        raise ValueError(f"resistance array last axis must be {N_SENSORS}, got {r.shape}")
    if r.min() <= 0.0:
        raise ValueError("resistances must be positive")
    dr = np.sqrt(r / cal.r0) - 1.0
    return dr * np.where(dr >= 0.0, cal.kappa_pos, cal.kappa_neg)


def resistance_from_strain(
    strain: StrainVector,
    cal: SensorCalibration,
    noise_seed=None,
    noise_sigma=0.005,
    timestamp=0.0,
) -> ResistanceFrame:
    rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    r = resistance_array_from_strain(strain.s, cal, rng=rng, noise_sigma=noise_sigma)
    return ResistanceFrame(r, timestamp)


def strain_from_resistance(frame: ResistanceFrame, cal: SensorCalibration) -> StrainVector:
    return StrainVector(strain_array_from_resistance(frame.r, cal))


def least_squares_kappa(resistance_series, strain_series):
    """Per-sensor slope of sqrt(R/R0) - 1 against reference strain.

    Closed form kappa_i = sum_t eps_it (sqrt(R_it/R_i0) - 1) / sum_t eps_it^2,
    the minimizer of sum_t (sqrt(R_it/R_i0) - 1 - kappa_i eps_it)^2. The
    baseline R_i0 is the first frame of the series.
    """
    r = np.asarray(resistance_series, dtype=np.float64)
    eps = np.asarray(strain_series, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != N_SENSORS:
        raise ValueError(f"resistance series must be (T, {N_SENSORS}), got {r.shape}")
    if r.shape != eps.shape:
        raise ValueError(f"series shapes differ: {r.shape} vs {eps.shape}")
    if r.shape[0] < 2:
        raise ValueError("need at least 2 frames to fit correction factors")
    if r.min() <= 0.0:
        raise ValueError("resistances must be positive")
    denom = (eps * eps).sum(axis=0)
    dead = np.flatnonzero(denom == 0.0)
    if dead.size:
        raise DegenerateDataError(
            f"sensor(s) {dead.tolist()} have all-zero strain; cannot fit a slope",
            sensor_indices=dead.tolist(),
        )
    dr = np.sqrt(r / r[0]) - 1.0
    return (eps * dr).sum(axis=0) / denom


# ---------------------------------------------------------------------------
# Calibration artifact: everything the inference path needs to turn raw
# resistances into strains and pose the fingers, as one JSON file.


def save_calibration_json(path, cal: SensorCalibration, phi, meta=None):
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if phi.shape != (3,):
        raise ValueError(f"phi must have 3 entries (one per finger), got {phi.shape}")
    doc = {
        "R0": cal.r0.tolist(),
        "kappa_pos": cal.kappa_pos.tolist(),
        "kappa_neg": cal.kappa_neg.tolist(),
        "phi": phi.tolist(),
        "meta": dict(meta) if meta else {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_calibration_json(path):
    """Returns (SensorCalibration, phi array of 3, meta dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("R0", "kappa_pos", "kappa_neg", "phi"):
        if key not in doc:
            raise ValueError(f"{path}: calibration file is missing {key!r}")
    cal = SensorCalibration(
        np.array(doc["R0"]), np.array(doc["kappa_pos"]), np.array(doc["kappa_neg"])
    )
    phi = np.asarray(doc["phi"], dtype=np.float64).reshape(3)
    return cal, phi, doc.get("meta", {})
