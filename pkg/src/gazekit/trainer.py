"""Joint training of network weights and per-person calibration rows.

One Adam optimizer carries the weights; a second, sparse one carries the
M-by-2N calibration matrix P, stepping only the rows of persons present
in each batch (each row keeps its own bias-correction counter).  Every
epoch redraws the detection jitter and renormalizes the whole dataset
against the jittered detections, so the network never sees the same
geometry twice.  After training, the mean calibration vector is fitted
on the clean (unjittered) training set and stored with the model; P is
kept in the report for diagnostics only.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import eyesim as es
from . import pipeline as pl
from . import diffnet as dn
from . import calib as cb

logger = logging.getLogger(__name__)

REPORT_FORMAT = "gazekit-report/1"
DIVERGENCE_LIMIT = 1e6


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 30
    lr0: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 10.0
    weight_decay: float = 1e-5
    batch_size: int = 256
    jitter_frac: float = 0.04
    n_calib: int = 3
    distance_mode: str = "eyes-and-face"
    eye_hidden: int = 64
    eye_out: int = 16
    head_hidden: int = 64
    lambda_origin: float = 1e-3
    lambda_c: float = 1e3
    lambda_iris: float = 1e-2
    aux_iris: bool = False
    aux_fraction: float = 0.01

    def __post_init__(self):
        if self.epochs <= 0 or self.lr0 <= 0 or self.batch_size <= 0:
            raise TrainError("epochs, lr0 and batch_size must be positive")
        if self.jitter_frac < 0 or not (0.0 <= self.aux_fraction <= 1.0):
            raise TrainError("jitter_frac or aux_fraction out of range")

    def arch(self) -> dn.ArchConfig:
        return dn.ArchConfig(
            n_calib=self.n_calib,
            eye_hidden=self.eye_hidden,
            eye_out=self.eye_out,
            head_hidden=self.head_hidden,
            distance_mode=self.distance_mode,
        )

    def hinges(self) -> dn.HingeConfig:
        return dn.HingeConfig(
            lambda_origin=self.lambda_origin,
            lambda_c=self.lambda_c,
            lambda_iris=self.lambda_iris,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown training config fields: {sorted(unknown)}")
        if "seed" not in d:
            raise TrainError("training config requires a seed")
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    state: AdamState, params: dict, grads: dict, lr: float, weight_decay: float = 0.0
) -> None:
    """In-place bias-corrected Adam with decoupled weight decay."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainError(f"non-finite gradient for {k} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1**state.t
    correct2 = 1.0 - b2**state.t
    for k, g in grads.items():
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / correct1
        v_hat = state.v[k] / correct2
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if weight_decay:
            params[k] -= lr * weight_decay * params[k]


@dataclass
class SparseAdamState:
    """Adam over matrix rows with independent per-row step counters."""

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray  # (rows,) int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_matrix(cls, rows: int, cols: int) -> "SparseAdamState":
        return cls(
            m=np.zeros((rows, cols)),
            v=np.zeros((rows, cols)),
            t=np.zeros(rows, dtype=int),
        )


def sparse_adam_step(
    state: SparseAdamState, matrix: np.ndarray, row_grads: np.ndarray, rows: np.ndarray, lr: float
) -> None:
    """Update only ``rows`` of ``matrix``; other rows are untouched."""
    if rows.size == 0 or matrix.shape[1] == 0:
        return
    g = row_grads[rows]
    if not np.isfinite(g).all():
        raise TrainError("non-finite calibration gradient")
    state.t[rows] += 1
    t = state.t[rows][:, None].astype(float)
    b1, b2 = state.beta1, state.beta2
    state.m[rows] = b1 * state.m[rows] + (1.0 - b1) * g
    state.v[rows] = b2 * state.v[rows] + (1.0 - b2) * g * g
    m_hat = state.m[rows] / (1.0 - b1**t)
    v_hat = state.v[rows] / (1.0 - b2**t)
    matrix[rows] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def jitter_detections(det: np.ndarray, interoc_px: np.ndarray, rng, frac: float) -> np.ndarray:
    """Offset each detection independently, uniform in a disk.

    ``det`` is (S, 2, 2); the disk radius is frac times that sample's
    interocular pixel distance.
    """
    if frac == 0.0:
        return det.copy()
    s = det.shape[0]
    r = frac * interoc_px[:, None] * np.sqrt(rng.uniform(size=(s, 2)))
    a = rng.uniform(0.0, 2.0 * np.pi, size=(s, 2))
    off = np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)
    return det + off


@dataclass
class TrainReport:
    config: TrainConfig
    epoch_losses: list
    final_p: np.ndarray  # (M, 2N)
    person_ids: np.ndarray  # (M,)
    mean_calibration: np.ndarray  # (2N,)
    final_train_loss: float

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "config": self.config.to_dict(),
            "epoch_losses": [float(x) for x in self.epoch_losses],
            "person_ids": [int(x) for x in self.person_ids],
            "P": [[float(v) for v in row] for row in self.final_p],
            "mean_calibration": [float(x) for x in self.mean_calibration],
            "final_train_loss": float(self.final_train_loss),
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    def save_loss_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss_mm", "lr"])
            for i, loss in enumerate(self.epoch_losses):
                w.writerow([i, repr(float(loss)), repr(lr_schedule(i, self.config))])


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(0x7E41, epoch))
    return np.random.Generator(np.random.Philox(ss))


def train(arrays: pl.DatasetArrays, cfg: TrainConfig) -> tuple[dict, TrainReport]:
    """Jointly fit (weights, P) on a dataset; returns (params, report)."""
    arch = cfg.arch()
    hinges = cfg.hinges()
    params = dn.init_params(cfg.seed, arch)
    theta_state = AdamState.for_params(params)

    s_count = arrays.n_samples
    m_count = arrays.n_persons
    p_matrix = np.zeros((m_count, arch.p_dim))
    p_state = SparseAdamState.for_matrix(m_count, arch.p_dim)

    if cfg.aux_iris:
        mask_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0x7E42,)))
        )
        n_flag = max(1, int(round(cfg.aux_fraction * s_count)))
        aux_mask = np.zeros(s_count, dtype=bool)
        aux_mask[mask_rng.choice(s_count, size=n_flag, replace=False)] = True
    else:
        aux_mask = None

    losses = []
    for epoch in range(cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        det = jitter_detections(arrays.det, _stored_interoc(arrays), rng, cfg.jitter_frac)
        nb = pl.normalize_batch(arrays, det=det)
        order = rng.permutation(s_count)
        lr = lr_schedule(epoch, cfg)

        total = 0.0
        for start in range(0, s_count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = pl.take_batch(nb, idx)
            p_rows = p_matrix[batch.person_index]
            mask = aux_mask[idx] if aux_mask is not None else None
            loss, grads, g_p = dn.loss_and_grad(params, arch, batch, p_rows, hinges, mask)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise TrainError(
                    f"training diverged at epoch {epoch}, batch {start // cfg.batch_size}: "
                    f"loss {loss}"
                )
            adam_step(theta_state, params, grads, lr, cfg.weight_decay)
            if arch.p_dim:
                row_grads = np.zeros_like(p_matrix)
                np.add.at(row_grads, batch.person_index, g_p)
                rows = np.unique(batch.person_index)
                sparse_adam_step(p_state, p_matrix, row_grads, rows, lr)
            total += loss * idx.size
        epoch_loss = total / s_count
        losses.append(epoch_loss)
        logger.info("epoch %d: loss %.4f mm (lr %.2g)", epoch, epoch_loss, lr)

    clean = pl.normalize_batch(arrays)
    p_bar = cb.mean_calibration(params, arch, clean, hinges)
    final_loss, _, _ = dn.loss_and_grad(
        params, arch, clean, p_matrix[clean.person_index], hinges
    )
    report = TrainReport(
        config=cfg,
        epoch_losses=losses,
        final_p=p_matrix,
        person_ids=arrays.unique_persons.copy(),
        mean_calibration=p_bar,
        final_train_loss=float(final_loss),
    )
    return params, report


def _stored_interoc(arrays: pl.DatasetArrays) -> np.ndarray:
    return np.linalg.norm(
        arrays.det[:, es.LEFT] - arrays.det[:, es.RIGHT], axis=-1
    )
