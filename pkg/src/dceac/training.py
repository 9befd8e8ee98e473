"""Autoencoder pretraining, joint reconstruction + clustering training, baselines."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from dceac import clustering
from dceac.autodiff import Tape, ops
from dceac.autodiff.optim import AdadeltaState, adadelta_step
from dceac.network import ArchitectureConfig, build_model, decoder_forward, embed, encoder_forward, watch_all
from dceac.utils import atomic_write

log = logging.getLogger(__name__)

VARIANTS = ("dceac", "rdec", "rdcec", "ae_kmeans")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.5
    rho: float = 0.95
    eps: float = 1e-6
    gamma: float = 0.3
    variant: str = "dceac"
    seed: int = 0
    p_scope: str = "batch"          # "batch" | "dataset"
    bn_mode: str = "train"          # decoder batch norm mode during joint training
    reset_optimizer: bool = True
    stop_tol: float | None = None   # convenience early stop on label churn; off by default
    kmeans_restarts: int = 20

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.p_scope not in ("batch", "dataset"):
            raise ValueError(f"p_scope must be 'batch' or 'dataset', got {self.p_scope!r}")
        if self.bn_mode not in ("train", "infer"):
            raise ValueError(f"bn_mode must be 'train' or 'infer', got {self.bn_mode!r}")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def optimizer(self):
        return AdadeltaState(rho=self.rho, eps=self.eps, lr=self.lr)


@dataclass
class EpochRecord:
    epoch: int
    L_r: float | None
    L_c: float | None
    L: float
    labels_changed_frac: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    COLUMNS = ("epoch", "L_r", "L_c", "L", "labels_changed_frac", "seconds")

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def rows(self, with_time=True):
        cols = self.COLUMNS if with_time else self.COLUMNS[:-1]
        fmt = lambda v: "" if v is None else (repr(v) if isinstance(v, float) else str(v))
        return [[fmt(getattr(r, c)) for c in cols] for r in self.records]

    def to_csv(self, path):
        with atomic_write(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            writer.writerows(self.rows())


@dataclass
class StepResult:
    params: object
    optimizer: AdadeltaState
    L_r: float | None
    L_c: float | None
    L: float
    q: np.ndarray | None = None


def _check_finite(value, where):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss at {where}")


def _apply(params, grads, optimizer, buffer_updates):
    weights = dict(params.weights)
    if params.centers is not None and "cluster.centers" in grads:
        weights["cluster.centers"] = params.centers
    new, optimizer = adadelta_step(weights, grads, optimizer)
    centers = new.pop("cluster.centers", params.centers)
    buffers = dict(params.buffers)
    buffers.update(buffer_updates)
    return params.replace(weights=new, buffers=buffers, centers=centers), optimizer


def reconstruction_step(params, x, optimizer, bn_training=True, where="step"):
    """One Adadelta step on the reconstruction loss alone."""
    tape = Tape()
    w = watch_all(tape, params.weights)
    z = encoder_forward(w, params.config, x)
    r, updates = decoder_forward(w, params.buffers, params.config, z, training=bn_training)
    loss = ops.mse_loss(x, r)
    value = float(loss.item())
    _check_finite(value, where)
    grads = tape.backward(loss, list(params.weights))
    params, optimizer = _apply(params, grads, optimizer, updates)
    return StepResult(params, optimizer, value, None, value)


def joint_loss(w, buffers, config, x, centers, gamma, p=None, use_decoder=True, bn_training=True):
    """Forward pass of L_r + gamma * L_c on already watched (or constant) weights.

    Returns ``(loss, l_r, l_c, q, buffer_updates)``; ``l_r`` is None without
    the decoder. When ``p`` is omitted it is derived from this batch's ``q``
    and treated as a constant.
    """
    z = encoder_forward(w, config, x)
    q = clustering.soft_assign(ops.global_avg_pool(z), centers)
    if p is None:
        p = clustering.target_distribution(q.data)
    l_c = clustering.kl_loss(np.asarray(p).astype(q.dtype), q)
    if not use_decoder:
        return ops.scale(l_c, gamma), None, l_c, q, {}
    r, updates = decoder_forward(w, buffers, config, z, training=bn_training)
    l_r = ops.mse_loss(x, r)
    return ops.add(l_r, ops.scale(l_c, gamma)), l_r, l_c, q, updates


def joint_step(params, x, optimizer, gamma, p=None, use_decoder=True, bn_training=True, where="step"):
    """One Adadelta step on L_r + gamma * L_c (or gamma * L_c without decoder).

    ``p`` are the targets for this batch; when omitted they are computed from
    the batch's own soft assignments. The returned ``q`` is pre-update.
    """
    if params.centers is None:
        raise ValueError("cluster centres are not initialised")
    tape = Tape()
    if use_decoder:
        w = watch_all(tape, params.weights)
    else:
        enc_names = [k for k in params.weights if not k.startswith("dec.")]
        w = watch_all(tape, params.weights, enc_names)
    mu = tape.watch("cluster.centers", params.centers)
    loss, l_r, l_c, q, updates = joint_loss(w, params.buffers, params.config, x, mu, gamma, p,
                                            use_decoder, bn_training)
    lc_value = float(l_c.item())
    lr_value = None if l_r is None else float(l_r.item())
    # logged in double precision so the decomposition holds exactly
    value = gamma * lc_value if l_r is None else lr_value + gamma * lc_value
    _check_finite(float(loss.item()), where)
    _check_finite(value, where)
    grads = tape.backward(loss, list(tape.leaves))
    params, optimizer = _apply(params, grads, optimizer, updates)
    return StepResult(params, optimizer, lr_value, lc_value, value, q.data)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _as_dataset(data, config):
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError(f"dataset must be a non-empty N x C x M x M array, got {data.shape}")
    want = (config.input_channels, config.input_size, config.input_size)
    if data.shape[1:] != want:
        raise ValueError(f"dataset images are {data.shape[1:]}, model expects {want}")
    return data


def pretrain_cae(data, config, params, optimizer=None):
    """Minimise the reconstruction loss for ``config.epochs`` epochs.

    Returns ``(params, log, optimizer)``.
    """
    config = config.validate()
    data = _as_dataset(data, params.config)
    optimizer = optimizer or config.optimizer()
    rng = np.random.default_rng(config.seed)
    train_log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        losses = []
        for b, idx in enumerate(_batches(len(data), config.batch_size, rng), 1):
            res = reconstruction_step(params, data[idx], optimizer, where=f"epoch {epoch} batch {b}")
            params, optimizer = res.params, res.optimizer
            losses.append(res.L_r)
        l_r = float(np.mean(losses))
        train_log.records.append(EpochRecord(epoch, l_r, None, l_r, None, time.perf_counter() - start))
        log.info("pretrain epoch %d/%d L_r=%.6f", epoch, config.epochs, l_r)
    return params, train_log, optimizer


@dataclass
class ClusterResult:
    params: object
    state: clustering.ClusterState
    log: TrainLog
    labels: np.ndarray
    optimizer: AdadeltaState | None = None


def soft_assignments(params, data, batch_size=32):
    return clustering.soft_assign(embed(params, data, batch_size), params.centers).data


def predict(params, data, batch_size=32):
    """Hard cluster labels from the trained encoder and centres."""
    if params.centers is None:
        raise ValueError("checkpoint has no cluster centres")
    return clustering.predict_labels(soft_assignments(params, data, batch_size))


def init_centers(params, data, config):
    """k-means on the pooled embeddings of the full dataset."""
    z = embed(params, data, config.batch_size)
    if len(z) < params.config.n_clusters:
        raise ValueError(f"cannot form {params.config.n_clusters} clusters from {len(z)} samples")
    state = clustering.kmeans_init(z, params.config.n_clusters, seed=config.seed,
                                   restarts=config.kmeans_restarts)
    return params.replace(centers=state.centers.astype(z.dtype)), state


def train_dceac(data, config, params, optimizer=None, use_decoder=True):
    """Centre initialisation, joint training, then hard label prediction.

    ``use_decoder=False`` drops the decoder and reconstruction term (the rDEC
    baseline). The optimizer state is fresh unless ``config.reset_optimizer``
    is false and one is passed in.
    """
    config = config.validate()
    data = _as_dataset(data, params.config)
    params, state = init_centers(params, data, config)
    if config.reset_optimizer or optimizer is None:
        optimizer = config.optimizer()
    rng = np.random.default_rng(config.seed)
    bn_training = config.bn_mode == "train"
    prev_labels = predict(params, data, config.batch_size)
    train_log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        p_all = None
        if config.p_scope == "dataset":
            p_all = clustering.target_distribution(soft_assignments(params, data, config.batch_size))
        labels = np.empty(len(data), dtype=np.int64)
        l_r, l_c, l_tot = [], [], []
        for b, idx in enumerate(_batches(len(data), config.batch_size, rng), 1):
            res = joint_step(params, data[idx], optimizer, config.gamma,
                             p=None if p_all is None else p_all[idx],
                             use_decoder=use_decoder, bn_training=bn_training,
                             where=f"epoch {epoch} batch {b}")
            params, optimizer = res.params, res.optimizer
            labels[idx] = clustering.predict_labels(res.q)
            l_c.append(res.L_c)
            l_tot.append(res.L)
            if res.L_r is not None:
                l_r.append(res.L_r)
        changed = float(np.mean(labels != prev_labels))
        prev_labels = labels
        rec = EpochRecord(epoch, float(np.mean(l_r)) if l_r else None, float(np.mean(l_c)),
                          float(np.mean(l_tot)), changed, time.perf_counter() - start)
        train_log.records.append(rec)
        log.info("joint epoch %d/%d L=%.6f L_c=%.6f changed=%.4f", epoch, config.epochs, rec.L, rec.L_c, changed)
        if config.stop_tol is not None and changed < config.stop_tol:
            log.info("label churn %.5f below %.5f, stopping", changed, config.stop_tol)
            break
    state = clustering.ClusterState(params.centers.copy(), state.inertia)
    return ClusterResult(params, state, train_log, predict(params, data, config.batch_size), optimizer)


@dataclass
class VariantResult:
    variant: str
    labels: np.ndarray
    params: object
    state: clustering.ClusterState
    pretrain_log: TrainLog | None
    log: TrainLog | None


def cluster_pretrained(data, config, params, optimizer=None):
    """Second stage of ``config.variant`` starting from pretrained parameters."""
    config = config.validate()
    variant = config.variant
    if variant == "rdcec" and params.config.attention:
        raise ValueError("rdcec needs an autoencoder pretrained without the attention gate")
    if variant in ("dceac", "rdec") and not params.config.attention:
        raise ValueError(f"{variant} needs an autoencoder pretrained with the attention gate")
    if variant == "ae_kmeans":
        data = _as_dataset(data, params.config)
        params, state = init_centers(params, data, config)
        return VariantResult(variant, predict(params, data, config.batch_size), params, state, None, None)
    res = train_dceac(data, config, params, optimizer, use_decoder=variant != "rdec")
    return VariantResult(variant, res.labels, res.params, res.state, None, res.log)


def train_variant(data, config, arch=None, pretrained=None):
    """Full two-stage run of one method: ae_kmeans, rdec, rdcec or dceac.

    ``pretrained`` may supply (params, optimizer) from an earlier
    autoencoder run to skip the first stage.
    """
    config = config.validate()
    arch = arch or ArchitectureConfig()
    if config.variant == "rdcec":
        arch = dataclasses.replace(arch, attention=False)
    pre_log = None
    if pretrained is None:
        params = build_model(arch, seed=config.seed)
        params, pre_log, optimizer = pretrain_cae(data, config, params)
    else:
        params, optimizer = pretrained
    result = cluster_pretrained(data, config, params, optimizer)
    result.pretrain_log = pre_log
    return result
