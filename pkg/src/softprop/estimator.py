"""Strain-to-shape estimator: per-finger strain encoder + vertex decoder.

One encoder maps a finger's 4 corrected strains to a 128-d latent code;
one decoder maps (rest vertex position / finger length) concatenated with
the latent to that vertex's displacement in mm. Both nets are shared
across the three fingers, so each finger's shape comes from the same
function applied to its own strain quadruple. Predicted absolute surface
is rest + displacement, preserving vertex correspondence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .datafiles import canonical_json_bytes, config_hash
from .errors import MissingArtifactError, TrainingError
from .geometry import DisplacementField
from .seeding import STAGE_TRAIN_SHAPE, child_rng
from .simulator import N_FINGERS, HandModel

LATENT = 128
ENCODER_SIZES = (4, 64, LATENT)
DECODER_SIZES = (3 + LATENT, 128, 64, 3)


@dataclass(frozen=True)
class ShapeModel:
    """Immutable encoder/decoder pair plus the normalization constants."""

    enc_spec: nn.MlpSpec
    enc_params: np.ndarray
    dec_spec: nn.MlpSpec
    dec_params: np.ndarray
    finger_length_mm: float
    n_vertices: int

    def __post_init__(self):
        if self.enc_spec.sizes[-1] != LATENT:
            raise ValueError(f"ShapeModel: latent width must be {LATENT}")
        if self.dec_spec.sizes[0] != 3 + LATENT or self.dec_spec.sizes[-1] != 3:
            raise ValueError("ShapeModel: decoder must map 131 -> 3")
        if self.finger_length_mm <= 0 or self.n_vertices < 4:
            raise ValueError("ShapeModel: bad normalization constants")
        object.__setattr__(
            self, "enc_params", np.ascontiguousarray(self.enc_params, dtype=np.float64)
        )
        object.__setattr__(
            self, "dec_params", np.ascontiguousarray(self.dec_params, dtype=np.float64)
        )


def init_shape_model(finger_length_mm, n_vertices, rng):
    """Fresh model whose decoder head is zeroed: it predicts rest exactly."""
    enc_spec = nn.MlpSpec.dense(list(ENCODER_SIZES))
    dec_spec = nn.MlpSpec.dense(list(DECODER_SIZES))
    enc_params = nn.init_params(enc_spec, rng)
    dec_params = nn.init_params(dec_spec, rng)
    w_last, b_last = nn.unpack_params(dec_spec, dec_params)[-1]
    w_last[:] = 0.0
    b_last[:] = 0.0
    return ShapeModel(
        enc_spec, enc_params, dec_spec, dec_params, float(finger_length_mm), int(n_vertices)
    )


def strains_from_lengths(sensor_lengths, rest_lengths):
    """Engineering strain per sensor: length / rest - 1."""
    lengths = np.asarray(sensor_lengths, dtype=np.float64)
    rest = np.asarray(rest_lengths, dtype=np.float64)
    return lengths / rest - 1.0


def _decode_batch(model: ShapeModel, z, rest_scaled):
    """z (B, 128) + rest_scaled (V, 3) -> displacements (B, V, 3)."""
    b = z.shape[0]
    v = rest_scaled.shape[0]
    dec_in = np.concatenate(
        [np.tile(rest_scaled, (b, 1)), np.repeat(z, v, axis=0)], axis=1
    )
    out = nn.forward(model.dec_spec, model.dec_params, dec_in)
    return out.reshape(b, v, 3)


def predict_displacements(model: ShapeModel, strains, rest_vertices):
    """(B, 4) strains + (V, 3) rest vertices -> (B, V, 3) displacements."""
    strains = np.asarray(strains, dtype=np.float64)
    squeeze = strains.ndim == 1
    strains = np.atleast_2d(strains)
    if strains.shape[1] != 4:
        raise ValueError(f"predict_displacements: need 4 strains, got {strains.shape}")
    rest_vertices = np.asarray(rest_vertices, dtype=np.float64)
    if rest_vertices.shape != (model.n_vertices, 3):
        raise ValueError(
            f"rest mesh has {rest_vertices.shape[0]} vertices; the model was "
            f"trained on {model.n_vertices}"
        )
    z = nn.forward(model.enc_spec, model.enc_params, strains)
    disp = _decode_batch(model, z, rest_vertices / model.finger_length_mm)
    return disp[0] if squeeze else disp


def predict(model: ShapeModel, strains, rest_meshes):
    """Strains (12,) + three rest SurfaceMeshes -> three DisplacementFields."""
    strains = np.asarray(strains, dtype=np.float64).reshape(-1)
    if strains.shape != (12,):
        raise ValueError(f"predict: expected 12 strains, got {strains.shape}")
    if len(rest_meshes) != N_FINGERS:
        raise ValueError("predict: expected 3 rest meshes")
    fields = []
    for j, mesh in enumerate(rest_meshes):
        disp = predict_displacements(model, strains[4 * j : 4 * j + 4], mesh.vertices)
        fields.append(DisplacementField(disp))
    return fields


# ---------------------------------------------------------------------------
# Training.


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch: int = 64
    lr: float = 1e-3
    lr_decay: float = 1.0  # multiplicative per-epoch decay
    val_fraction: float = 0.1
    min_frames: int = 20
    verts_per_step: int = 0  # 0 = all vertices; else subsample per step
    refit_head: bool = False  # closed-form decoder-head refit after Adam

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("TrainConfig: val_fraction must be in (0, 1)")
        if self.batch < 1 or self.lr <= 0:
            raise ValueError("TrainConfig: bad batch or learning rate")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("TrainConfig: lr_decay must be in (0, 1]")


@dataclass(frozen=True)
class TrainReport:
    train_mse: tuple  # mm^2 per epoch
    val_mse: tuple  # mm^2 per epoch
    best_epoch: int
    heldout_mean_mm: float
    seed: int
    config_hash: str

    def __post_init__(self):
        if len(self.train_mse) < 1 or len(self.train_mse) != len(self.val_mse):
            raise ValueError("TrainReport: epoch series empty or mismatched")
        if not np.isfinite(self.train_mse).all() or not np.isfinite(self.val_mse).all():
            raise ValueError("TrainReport: non-finite losses")


def samples_from_frames(frames, hand: HandModel):
    """Flatten hand frames into per-finger (strains, displacement) samples.

    Returns (X (N, 4), Y (N, V, 3), frame_index (N,), has_force (F,)).
    """
    v_counts = {f.surface.vertices.shape[0] for f in hand.fingers}
    if len(v_counts) != 1:
        raise ValueError("samples_from_frames: fingers disagree on vertex count")
    rests = [f.surface.vertices for f in hand.fingers]
    rest_lengths = [f.sensor_rest_lengths for f in hand.fingers]
    xs, ys, frame_ix = [], [], []
    has_force = np.zeros(len(frames), dtype=bool)
    for i, frame in enumerate(frames):
        has_force[i] = any(len(evs) > 0 for evs in frame.forces)
        for j in range(N_FINGERS):
            strains = strains_from_lengths(
                frame.sensor_lengths[4 * j : 4 * j + 4], rest_lengths[j]
            )
            verts = frame.nodes[j][hand.fingers[j].rest.surface_map]
            xs.append(strains)
            ys.append(verts - rests[j])
            frame_ix.append(i)
    return (
        np.array(xs),
        np.array(ys),
        np.array(frame_ix, dtype=np.int64),
        has_force,
    )


def split_frames(n_frames, has_force, val_fraction, rng):
    """Frame-level 90/10 style split, stratified by force-event presence."""
    val = []
    for mask in (has_force, ~has_force):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        perm = rng.permutation(idx)
        k = max(1, int(round(val_fraction * idx.size)))
        val.extend(perm[:k].tolist())
    val = np.array(sorted(val), dtype=np.int64)
    train = np.setdiff1d(np.arange(n_frames), val)
    if train.size == 0 or val.size == 0:
        raise TrainingError("split left an empty train or validation set")
    return train, val


def _forward_backward(model, x, y, rest_scaled, vert_ix=None):
    """Loss (mm^2) and gradients for one minibatch; None grads skips backward."""
    b = x.shape[0]
    rest = rest_scaled if vert_ix is None else rest_scaled[vert_ix]
    target = y if vert_ix is None else y[:, vert_ix]
    v = rest.shape[0]
    z, enc_cache = nn.forward_cache(model.enc_spec, model.enc_params, x)
    dec_in = np.concatenate(
        [np.tile(rest, (b, 1)), np.repeat(z, v, axis=0)], axis=1
    )
    pred, dec_cache = nn.forward_cache(model.dec_spec, model.dec_params, dec_in)
    loss, grad_pred = nn.mse_loss(pred, target.reshape(b * v, 3))
    grad_dec, grad_in = nn.backward(model.dec_spec, model.dec_params, dec_cache, grad_pred)
    grad_z = grad_in[:, 3:].reshape(b, v, LATENT).sum(axis=1)
    grad_enc, _ = nn.backward(model.enc_spec, model.enc_params, enc_cache, grad_z)
    return loss, grad_enc, grad_dec


def _refit_decoder_head(model: ShapeModel, x, y, rest_scaled):
    """Exact least-squares solve for the decoder's final linear layer.

    Adam handles the nonlinear features; the head is a linear problem, so
    finishing with its closed-form optimum is free precision.
    """
    b = x.shape[0]
    v = rest_scaled.shape[0]
    z = nn.forward(model.enc_spec, model.enc_params, x)
    h = np.concatenate([np.tile(rest_scaled, (b, 1)), np.repeat(z, v, axis=0)], axis=1)
    layers = nn.unpack_params(model.dec_spec, model.dec_params)
    for w, bias in layers[:-1]:
        h = np.maximum(h @ w + bias, 0.0)
    feats = np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(feats, y.reshape(-1, 3), rcond=None)
    params = model.dec_params.copy()
    w_last, b_last = nn.unpack_params(model.dec_spec, params)[-1]
    w_last[:] = sol[:-1]
    b_last[:] = sol[-1]
    return ShapeModel(
        model.enc_spec, model.enc_params, model.dec_spec, params,
        model.finger_length_mm, model.n_vertices,
    )


def _val_loss(model, x, y, rest_scaled, chunk=256):
    total = 0.0
    count = 0
    for s in range(0, x.shape[0], chunk):
        xs, ys = x[s : s + chunk], y[s : s + chunk]
        z = nn.forward(model.enc_spec, model.enc_params, xs)
        disp = _decode_batch(model, z, rest_scaled)
        total += float(((disp - ys) ** 2).sum())
        count += ys.size
    return total / count


def train(frames, hand: HandModel, cfg: TrainConfig, seed):
    """Adam on displacement MSE; returns (best-epoch ShapeModel, TrainReport)."""
    if len(frames) < cfg.min_frames:
        raise TrainingError(
            f"dataset holds {len(frames)} frames; training needs {cfg.min_frames}"
        )
    x, y, frame_ix, has_force = samples_from_frames(frames, hand)
    finger_length = hand.fingers[0].length_mm
    rest_scaled = hand.fingers[0].surface.vertices / finger_length
    n_vertices = rest_scaled.shape[0]

    rng = child_rng(seed, STAGE_TRAIN_SHAPE, 0)
    model = init_shape_model(finger_length, n_vertices, rng)
    train_f, val_f = split_frames(len(frames), has_force, cfg.val_fraction, rng)
    train_mask = np.isin(frame_ix, train_f)
    tr = np.flatnonzero(train_mask)
    va = np.flatnonzero(~train_mask)

    enc_adam = nn.AdamState.for_params(model.enc_params.size, lr=cfg.lr)
    dec_adam = nn.AdamState.for_params(model.dec_params.size, lr=cfg.lr)

    train_curve, val_curve = [], []
    best = (np.inf, None, None, -1)
    for epoch in range(cfg.epochs):
        enc_adam.lr = cfg.lr * cfg.lr_decay**epoch
        dec_adam.lr = enc_adam.lr
        order = rng.permutation(tr)
        epoch_loss = 0.0
        seen = 0
        for s in range(0, order.size, cfg.batch):
            batch = order[s : s + cfg.batch]
            vert_ix = None
            if cfg.verts_per_step:
                vert_ix = rng.choice(
                    n_vertices, size=min(cfg.verts_per_step, n_vertices), replace=False
                )
            try:
                loss, g_enc, g_dec = _forward_backward(
                    model, x[batch], y[batch], rest_scaled, vert_ix
                )
            except ValueError as exc:  # non-finite gradients: numerical blowup
                raise TrainingError(f"training diverged at epoch {epoch}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            new_enc = nn.adam_step(enc_adam, model.enc_params, g_enc)
            new_dec = nn.adam_step(dec_adam, model.dec_params, g_dec)
            model = ShapeModel(
                model.enc_spec, new_enc, model.dec_spec, new_dec,
                finger_length, n_vertices,
            )
            epoch_loss += loss * batch.size
            seen += batch.size
        train_curve.append(epoch_loss / seen)
        vloss = _val_loss(model, x[va], y[va], rest_scaled)
        val_curve.append(vloss)
        if not np.isfinite(vloss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        if vloss < best[0]:
            best = (vloss, model.enc_params.copy(), model.dec_params.copy(), epoch)

    model = ShapeModel(
        model.enc_spec, best[1], model.dec_spec, best[2], finger_length, n_vertices
    )
    if cfg.refit_head:
        refit = _refit_decoder_head(model, x[tr], y[tr], rest_scaled)
        if _val_loss(refit, x[va], y[va], rest_scaled) < best[0]:
            model = refit
    disp = _decode_batch(
        model, nn.forward(model.enc_spec, model.enc_params, x[va]), rest_scaled
    )
    heldout = float(np.linalg.norm(disp - y[va], axis=2).mean())
    report = TrainReport(
        train_mse=tuple(train_curve),
        val_mse=tuple(val_curve),
        best_epoch=best[3],
        heldout_mean_mm=heldout,
        seed=int(seed),
        config_hash=config_hash(asdict(cfg)),
    )
    return model, report


# ---------------------------------------------------------------------------
# Evaluation and checkpoints.


def evaluate(model: ShapeModel, frames, hand: HandModel):
    """Held-out metrics: {mean_mm, std_mm, per_frame[]} on vertex error.

    per_frame entries average the per-vertex error across all fingers of
    one frame; mean_nn_mm additionally reports the correspondence-free
    nearest-neighbour metric used for cloud baselines.
    """
    from .geometry import mean_nn_distance

    x, y, frame_ix, _ = samples_from_frames(frames, hand)
    rest_scaled = hand.fingers[0].surface.vertices / model.finger_length_mm
    z = nn.forward(model.enc_spec, model.enc_params, x)
    per_sample_vert = []
    per_sample_nn = []
    for s in range(x.shape[0]):
        disp = _decode_batch(model, z[s : s + 1], rest_scaled)[0]
        err = np.linalg.norm(disp - y[s], axis=1)
        per_sample_vert.append(float(err.mean()))
        rest = rest_scaled * model.finger_length_mm
        per_sample_nn.append(float(mean_nn_distance(rest + disp, rest + y[s])))
    per_sample_vert = np.array(per_sample_vert)
    per_frame = [
        float(per_sample_vert[frame_ix == i].mean()) for i in range(len(frames))
    ]
    return {
        "metric": "mean_vertex_error_mm",
        "mean_mm": float(per_sample_vert.mean()),
        "std_mm": float(per_sample_vert.std()),
        "per_frame": per_frame,
        "mean_nn_mm": float(np.mean(per_sample_nn)),
    }


ENCODER_FILE = "encoder.ksnn"
DECODER_FILE = "decoder.ksnn"
SHAPE_META_FILE = "shape.json"


def save_shape_model(directory, model: ShapeModel, meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(directory / ENCODER_FILE, model.enc_spec, model.enc_params)
    nn.save_checkpoint(directory / DECODER_FILE, model.dec_spec, model.dec_params)
    doc = {
        "finger_length_mm": model.finger_length_mm,
        "n_vertices": model.n_vertices,
        "meta": meta or {},
    }
    (directory / SHAPE_META_FILE).write_bytes(canonical_json_bytes(doc) + b"\n")
    return directory


def load_shape_model(directory, producer="train-shape"):
    directory = Path(directory)
    for name in (ENCODER_FILE, DECODER_FILE, SHAPE_META_FILE):
        if not (directory / name).is_file():
            raise MissingArtifactError(str(directory / name), producer=producer)
    enc_spec, enc_params, _ = nn.load_checkpoint(directory / ENCODER_FILE)
    dec_spec, dec_params, _ = nn.load_checkpoint(directory / DECODER_FILE)
    doc = json.loads((directory / SHAPE_META_FILE).read_text())
    model = ShapeModel(
        enc_spec,
        enc_params,
        dec_spec,
        dec_params,
        float(doc["finger_length_mm"]),
        int(doc["n_vertices"]),
    )
    return model, doc.get("meta", {})
