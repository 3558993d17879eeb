"""Field-of-view masking, the training loss, Adam, and the training loop.

Training minimizes the mean absolute reconstruction error inside the scan
field of view, sample by sample (batch size 1): solve the reconstruction
forward, integrate the adjoint system backward for gradients, take one Adam
step over (theta, gamma) with separate learning rates for the two blocks.
The checkpoint retained is the state with the lowest mean validation loss;
epoch 0 (the untrained state) is eligible.  Gradients are clipped at a
global norm of 1.0 as a divergence guard; every clip is logged.

The loss history CSV has one row per epoch:
epoch, mean_train_loss, mean_val_loss, gamma, adam_t.  The adam_t column is
the optimizer's step counter, which makes resumed runs auditable (it must
increase across a resume boundary).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, DivergenceError
from .geometry import ConeGeometry, FanGeometry, VolumeGrid
from .network import (
    NetArch,
    NetParams,
    init_params,
    load_net_params,
    save_net_params,
)
from .ode import NodeDynamics, OdeConfig, adjoint_backward, initial_volume, rk4_solve
from .projector import Sinogram, Volume

logger = logging.getLogger(__name__)

OPT_MAGIC = b"CTOP"
OPT_VERSION = 1


def fov_mask(grid: VolumeGrid, geom) -> Volume:
    """Binary mask of the region every projection covers.

    The scan field of view is the disk (cylinder in 3D, axis = rotation
    axis) around the isocenter subtended by the detector from every source
    position; its radius is additionally capped by the grid so the mask
    never claims voxels the grid does not reach laterally.  A voxel is
    inside when its center distance is strictly below the radius.  Without
    a geometry (geom = None) only the grid cap applies.
    """
    lateral = grid.shape[:2] if grid.ndim == 3 else grid.shape
    r_grid = (min(lateral) - 1) / 2.0 * grid.voxel_size
    if geom is None:
        radius = r_grid
    else:
        if isinstance(geom, FanGeometry):
            width = geom.n_detectors * geom.detector_pixel_size
        elif isinstance(geom, ConeGeometry):
            width = geom.detector_cols * geom.detector_pixel_size
        else:
            raise TypeError(f"unsupported geometry type {type(geom).__name__}")
        half_fan = math.atan2(width / 2.0, geom.source_distance + geom.detector_distance)
        r_geom = geom.source_distance * math.sin(half_fan)
        radius = min(r_geom, r_grid)

    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    rr = np.sqrt(xs[:, None] ** 2 + ys[None, :] ** 2)
    mask2d = (rr < radius).astype(np.float64)
    if grid.ndim == 3:
        values = np.broadcast_to(mask2d[:, :, None], grid.shape).copy()
    else:
        values = mask2d
    return Volume(grid, values)


def l1_fov_loss(pred: Volume, target: Volume, mask: Volume) -> float:
    """Mean absolute difference over masked voxels."""
    pv = pred.values
    tv = target.values
    mv = mask.values if isinstance(mask, Volume) else np.asarray(mask, dtype=np.float64)
    if pv.shape != tv.shape or pv.shape != mv.shape:
        raise ValueError(
            f"shape mismatch: pred {pv.shape}, target {tv.shape}, mask {mv.shape}"
        )
    total = mv.sum()
    if total == 0:
        raise ValueError("mask selects no voxels")
    return float(np.sum(mv * np.abs(pv - tv)) / total)


def _l1_fov_grad(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.sign(pred - target) * mask / mask.sum()


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(params_flat: np.ndarray, grads_flat: np.ndarray, state: AdamState, lrs):
    """One bias-corrected Adam update; lrs may be a scalar or per-entry vector."""
    if params_flat.shape != grads_flat.shape:
        raise ValueError(
            f"params/grads length mismatch: {params_flat.shape} vs {grads_flat.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads_flat
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads_flat**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    updated = params_flat - np.asarray(lrs) * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; the two learning rates follow the two blocks."""

    epochs: int = 30
    batch_size: int = 1
    lr_net: float = 1e-4
    lr_gamma: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    gamma_init: float = 0.01
    clip_norm: float = 1.0
    init_window: str = "ram-lak"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("batch_size", f"only batch size 1 is supported, got {self.batch_size}")
        for name in ("lr_net", "lr_gamma", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, f"must be in [0, 1), got {getattr(self, name)}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm", f"must be > 0 or None, got {self.clip_norm}")


@dataclass
class Checkpoint:
    """Best-so-far model plus the latest optimizer state for resuming."""

    params: NetParams
    gamma: float
    epoch: int
    val_loss: float
    epochs_completed: int
    seed: int
    ode_cfg: OdeConfig
    train_cfg: TrainConfig
    adam: AdamState | None = None
    latest_flat: np.ndarray | None = None


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Write the params binary, a JSON sidecar, and the optimizer state."""
    path = str(path)
    save_net_params(path, ck.params)
    sidecar = {
        "gamma": ck.gamma,
        "epoch": ck.epoch,
        "val_loss": ck.val_loss,
        "epochs_completed": ck.epochs_completed,
        "seed": ck.seed,
        "n_params": ck.params.n_params,
        "ode": dataclasses.asdict(ck.ode_cfg),
        "train": dataclasses.asdict(ck.train_cfg),
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if ck.adam is not None and ck.latest_flat is not None:
        n = ck.latest_flat.size
        with open(path + ".opt.bin", "wb") as fh:
            fh.write(OPT_MAGIC)
            fh.write(struct.pack("<IQI", OPT_VERSION, ck.adam.t, n))
            fh.write(ck.adam.m.astype("<f8").tobytes())
            fh.write(ck.adam.v.astype("<f8").tobytes())
            fh.write(ck.latest_flat.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = str(path)
    params = load_net_params(path)
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    ode_cfg = OdeConfig(**sidecar["ode"])
    train_cfg = TrainConfig(**sidecar["train"])
    adam = None
    latest = None
    opt_path = path + ".opt.bin"
    try:
        fh = open(opt_path, "rb")
    except FileNotFoundError:
        fh = None
    if fh is not None:
        with fh:
            magic = fh.read(4)
            if magic != OPT_MAGIC:
                raise DataFormatError(f"{opt_path}: bad magic {magic!r}")
            version, t, n = struct.unpack("<IQI", fh.read(16))
            if version != OPT_VERSION:
                raise DataFormatError(f"{opt_path}: unsupported version {version}")
            payload = np.frombuffer(fh.read(3 * n * 8), dtype="<f8")
            if payload.size != 3 * n:
                raise DataFormatError(f"{opt_path}: truncated payload")
            adam = AdamState(
                payload[:n].astype(np.float64),
                payload[n : 2 * n].astype(np.float64),
                int(t),
                train_cfg.beta1,
                train_cfg.beta2,
                train_cfg.eps,
            )
            latest = payload[2 * n :].astype(np.float64)
    return Checkpoint(
        params=params,
        gamma=float(sidecar["gamma"]),
        epoch=int(sidecar["epoch"]),
        val_loss=float(sidecar["val_loss"]),
        epochs_completed=int(sidecar["epochs_completed"]),
        seed=int(sidecar["seed"]),
        ode_cfg=ode_cfg,
        train_cfg=train_cfg,
        adam=adam,
        latest_flat=latest,
    )


def _check_dataset(name: str, samples) -> None:
    if not samples:
        raise ConfigError(name, "dataset is empty")
    for p, target in samples:
        if not isinstance(p, Sinogram) or not isinstance(target, Volume):
            raise ConfigError(name, "samples must be (Sinogram, Volume) pairs")


def _sample_loss_and_grads(p, target, params, gamma, ode_cfg, window, mask):
    dyn = NodeDynamics(p, target.grid, params, gamma, ode_cfg)
    x0 = initial_volume(p, target.grid, window)
    x_T, _ = rk4_solve(dyn, x0, ode_cfg)
    loss = l1_fov_loss(x_T, target, mask)
    dL = _l1_fov_grad(x_T.values, target.values, mask.values)
    res = adjoint_backward(dyn, x_T, Volume(target.grid, dL), ode_cfg)
    return loss, res.grad_params.flatten(), res.grad_gamma


def _val_loss(p, target, params, gamma, ode_cfg, window, mask):
    dyn = NodeDynamics(p, target.grid, params, gamma, ode_cfg)
    x0 = initial_volume(p, target.grid, window)
    try:
        x_T, _ = rk4_solve(dyn, x0, ode_cfg)
    except DivergenceError:
        return math.inf
    return l1_fov_loss(x_T, target, mask)


def _history_row(fh, epoch, train_loss, val_loss, gamma, adam_t):
    train_str = "" if train_loss is None else repr(float(train_loss))
    fh.write(f"{epoch},{train_str},{float(val_loss)!r},{float(gamma)!r},{adam_t}\n")
    fh.flush()


def train(
    train_set,
    val_set,
    arch: NetArch,
    ode_cfg: OdeConfig,
    cfg: TrainConfig,
    history_path=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Run the training loop and return the lowest-validation checkpoint.

    Divergent training solves are retried once with the data-consistency
    weight halved for that sample; a second failure skips the sample.  An
    epoch where more than 20% of samples diverge aborts the run.
    """
    _check_dataset("train_set", train_set)
    _check_dataset("val_set", val_set)

    masks_train = [fov_mask(t.grid, p.geom) for p, t in train_set]
    masks_val = [fov_mask(t.grid, p.geom) for p, t in val_set]

    if resume_from is not None:
        if resume_from.adam is None or resume_from.latest_flat is None:
            raise ConfigError("resume", "checkpoint has no optimizer state to resume from")
        z = resume_from.latest_flat.copy()
        params = NetParams.from_flat(arch, z[:-1])
        gamma = float(z[-1])
        adam = resume_from.adam
        start_epoch = resume_from.epochs_completed + 1
        best_params = resume_from.params.copy()
        best_gamma = resume_from.gamma
        best_epoch = resume_from.epoch
        best_val = resume_from.val_loss
    else:
        params = init_params(arch, seed=cfg.seed)
        gamma = cfg.gamma_init
        z = np.concatenate([params.flatten(), [gamma]])
        adam = AdamState.zeros(z.size, cfg.beta1, cfg.beta2, cfg.eps)
        start_epoch = 1
        best_params = params.copy()
        best_gamma = gamma
        best_epoch = 0
        best_val = None

    n_params = params.n_params
    lr_vec = np.full(n_params + 1, cfg.lr_net)
    lr_vec[-1] = cfg.lr_gamma

    hist_fh = None
    if history_path is not None:
        # resumed runs append to an existing history instead of rewriting it
        hist_fh = open(history_path, "w" if resume_from is None else "a", newline="")
        if hist_fh.tell() == 0:
            hist_fh.write("epoch,mean_train_loss,mean_val_loss,gamma,adam_t\n")

    try:
        if resume_from is None:
            # epoch 0: the untrained model, eligible for selection
            val0 = [
                _val_loss(p, t, params, gamma, ode_cfg, cfg.init_window, m)
                for (p, t), m in zip(val_set, masks_val)
            ]
            best_val = float(np.mean(val0))
            if hist_fh is not None:
                _history_row(hist_fh, 0, None, best_val, gamma, adam.t)
            logger.info("epoch 0: val %.6e gamma %.6g", best_val, gamma)

        max_diverged = 0.2 * len(train_set)
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_set))
            train_losses = []
            n_diverged = 0
            for idx in order:
                p, target = train_set[idx]
                mask = masks_train[idx]
                try:
                    loss, g_theta, g_gamma = _sample_loss_and_grads(
                        p, target, params, gamma, ode_cfg, cfg.init_window, mask
                    )
                except DivergenceError as first:
                    logger.warning(
                        "epoch %d sample %d diverged (%s); retrying at gamma/2",
                        epoch,
                        idx,
                        first,
                    )
                    try:
                        loss, g_theta, g_gamma = _sample_loss_and_grads(
                            p, target, params, gamma / 2.0, ode_cfg, cfg.init_window, mask
                        )
                    except DivergenceError as second:
                        n_diverged += 1
                        logger.warning(
                            "epoch %d sample %d diverged again (%s); skipped",
                            epoch,
                            idx,
                            second,
                        )
                        if n_diverged > max_diverged:
                            raise DivergenceError(
                                epoch,
                                math.inf,
                                f"training aborted: {n_diverged} of "
                                f"{len(train_set)} samples diverged in epoch {epoch}",
                            ) from second
                        continue
                grads = np.concatenate([g_theta, [g_gamma]])
                if cfg.clip_norm is not None:
                    gnorm = float(np.linalg.norm(grads))
                    if gnorm > cfg.clip_norm:
                        grads *= cfg.clip_norm / gnorm
                        logger.info(
                            "epoch %d sample %d: gradient norm %.3g clipped to %.3g",
                            epoch,
                            idx,
                            gnorm,
                            cfg.clip_norm,
                        )
                z, adam = adam_step(z, grads, adam, lr_vec)
                params = NetParams.from_flat(arch, z[:-1])
                gamma = float(z[-1])
                train_losses.append(loss)

            val_losses = [
                _val_loss(p, t, params, gamma, ode_cfg, cfg.init_window, m)
                for (p, t), m in zip(val_set, masks_val)
            ]
            mean_train = float(np.mean(train_losses)) if train_losses else math.inf
            mean_val = float(np.mean(val_losses))
            if hist_fh is not None:
                _history_row(hist_fh, epoch, mean_train, mean_val, gamma, adam.t)
            logger.info(
                "epoch %d: train %.6e val %.6e gamma %.6g",
                epoch,
                mean_train,
                mean_val,
                gamma,
            )
            if best_val is None or mean_val < best_val:
                best_val = mean_val
                best_params = params.copy()
                best_gamma = gamma
                best_epoch = epoch
    finally:
        if hist_fh is not None:
            hist_fh.close()

    return Checkpoint(
        params=best_params,
        gamma=best_gamma,
        epoch=best_epoch,
        val_loss=best_val,
        epochs_completed=start_epoch + cfg.epochs - 1,
        seed=cfg.seed,
        ode_cfg=ode_cfg,
        train_cfg=cfg,
        adam=adam,
        latest_flat=z.copy(),
    )
