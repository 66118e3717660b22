"""Self-supervised training loop: contrastive + rotation-prediction objectives."""

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from acmnet import model as M
from acmnet.augment import GroupKind, TransformGroup, build_view_batch, derive_seed
from acmnet.errors import FormatError, NumericalError, ParameterError
from acmnet.loss import (
    ContrastiveConfig,
    DenominatorMode,
    LossBreakdown,
    ntxent_loss,
    rotation_ce_loss,
)

log = logging.getLogger(__name__)

_PERM_TAG = 0x5045524D  # "PERM": epoch shuffles
_BATCH_TAG = 0x42415443  # "BATC": per-step augmentation seeds


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.003
    epochs: int = 30
    temperature: float = 0.01
    loss_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    global_seed: int = 0
    enable_appearance_module: bool = True
    enable_geometry_module: bool = True
    geometry_group: str = "c4"
    denominator_mode: str = DenominatorMode.PAPER_EXCLUDES_SELF_IMAGE.value
    predictive_reduction: str = "sum"
    max_steps: int = None
    train_split: str = "reference"
    jobs: int = 1
    dtype: str = "float32"

    def validate(self):
        if self.enable_appearance_module and self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 when the appearance module is on")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not (self.enable_appearance_module or self.enable_geometry_module):
            raise ParameterError("at least one of the two modules must be enabled")
        if self.train_split not in ("reference", "all"):
            raise ParameterError("train_split must be 'reference' or 'all'")
        if self.predictive_reduction not in ("sum", "mean"):
            raise ParameterError("predictive_reduction must be 'sum' or 'mean'")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError("dtype must be float32 or float64")
        GroupKind(self.geometry_group)
        ContrastiveConfig(self.temperature, self.denominator_mode)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    t: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, weights):
        return cls(0, {k: np.zeros_like(w) for k, w in weights.items()},
                   {k: np.zeros_like(w) for k, w in weights.items()})


def adam_step(weights, grads, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new ``(weights, state)``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(w)
        elif g.shape != w.shape:
            raise ParameterError(f"gradient for {k} has shape {g.shape}, expected {w.shape}")
        dt = w.dtype.type
        m = dt(beta1) * state.m[k] + dt(1.0 - beta1) * g
        v = dt(beta2) * state.v[k] + dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        new_w[k] = (w - dt(learning_rate) * m_hat / (np.sqrt(v_hat) + dt(eps))).astype(w.dtype)
        new_m[k] = m.astype(w.dtype)
        new_v[k] = v.astype(w.dtype)
    return new_w, AdamState(t, new_m, new_v)


def loss_and_grads(params, batch, config):
    """Forward both branches through the shared encoder and backpropagate.

    Returns ``(LossBreakdown, grads, projector_cache)``. A disabled module
    contributes exactly 0 to the loss and nothing to the gradient.
    """
    grads = {}
    lc = lp = 0.0
    pcache = None
    if len(batch.contrastive):
        # the projector runs even with the module off so its batch-norm
        # statistics keep tracking the encoder, exactly as under a zero weight
        feats, ecache = M.encoder_forward(params, batch.contrastive, return_cache=True)
        z, pcache = M.projector_forward(params, feats, training=True, return_cache=True)
    if config.enable_appearance_module:
        ccfg = ContrastiveConfig(config.temperature, config.denominator_mode)
        lc, dz = ntxent_loss(z, ccfg, return_grad=True)
        pg, dfeats = M.projector_backward(params, pcache, dz.astype(params.dtype))
        eg, _ = M.encoder_backward(params, ecache, dfeats)
        M.accumulate(grads, pg)
        M.accumulate(grads, eg)
    if config.enable_geometry_module:
        feats, ecache = M.encoder_forward(params, batch.predictive, return_cache=True)
        logits, hcache = M.rotation_head_forward(params, feats, return_cache=True)
        lp, dlogits = rotation_ce_loss(logits, batch.labels, config.predictive_reduction,
                                       return_grad=True)
        dlogits = dlogits * params.dtype.type(config.loss_weight)
        hg, dfeats = M.rotation_head_backward(params, hcache, dlogits)
        eg, _ = M.encoder_backward(params, ecache, dfeats)
        M.accumulate(grads, hg)
        M.accumulate(grads, eg)
    total = lc + config.loss_weight * lp
    return LossBreakdown(float(lc), float(lp), config.loss_weight, float(total)), grads, pcache


def training_images(dataset, config):
    frames = dataset.reference_frames() if config.train_split == "reference" else dataset.frames
    return [f.image for f in frames]


@dataclass
class Checkpoint:
    params: M.ModelParams
    optimizer: AdamState
    train_config: TrainConfig
    step: int


def save_checkpoint(params, optimizer_state, train_config, path, step=0):
    header = {
        "kind": "acmnet-checkpoint",
        "model_config": params.config.to_dict(),
        "train_config": train_config.to_dict(),
        "adam_t": int(optimizer_state.t),
        "step": int(step),
        "weights": list(params.weights),
        "buffers": list(params.buffers),
    }
    tensors = {}
    for k, w in params.weights.items():
        tensors["w/" + k] = w
    for k, b in params.buffers.items():
        tensors["b/" + k] = b
    for k in params.weights:
        tensors["m/" + k] = optimizer_state.m[k]
        tensors["v/" + k] = optimizer_state.v[k]
    M.write_container(path, header, tensors)


def load_checkpoint(path, dtype=np.float32):
    header, tensors = M.read_container(path)
    try:
        mcfg = M.ModelConfig.from_dict(header["model_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        weights = {k: tensors["w/" + k].astype(dtype) for k in header["weights"]}
        buffers = {k: tensors["b/" + k].astype(dtype) for k in header["buffers"]}
        m = {k: tensors["m/" + k].astype(dtype) for k in header["weights"]}
        v = {k: tensors["v/" + k].astype(dtype) for k in header["weights"]}
        params = M.ModelParams(mcfg, weights, buffers)
        ref = M.init_params(mcfg, dtype)
    except (KeyError, TypeError, ParameterError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint ({exc})") from exc
    for k, w in ref.weights.items():
        if k not in weights or weights[k].shape != w.shape:
            raise FormatError(f"{path}: tensor {k} missing or mis-shaped")
    return Checkpoint(params, AdamState(int(header["adam_t"]), m, v), tcfg, int(header["step"]))


def train(dataset, model_config, train_config, checkpoint_dir=None, log_path=None,
          resume=None, on_step=None):
    """Run the training loop; returns ``(params, log_records)``.

    Step ``b`` of epoch ``e`` draws its augmentations from
    ``derive_seed(global_seed, e, b)`` and epoch ``e`` shuffles with
    ``derive_seed(global_seed, e)``, so resuming from any checkpoint is exact.
    """
    train_config.validate()
    model_config.validate()
    dtype = np.dtype(train_config.dtype)
    images = [np.asarray(x, dtype=dtype) for x in training_images(dataset, train_config)]
    n_img = len(images)
    if n_img == 0:
        raise ParameterError("training split is empty")
    n = train_config.batch_size
    if n > n_img:
        raise ParameterError(f"batch_size {n} exceeds the {n_img} training images")
    steps_per_epoch = n_img // n
    total_steps = steps_per_epoch * train_config.epochs
    if train_config.max_steps is not None:
        total_steps = min(total_steps, train_config.max_steps)

    if resume is not None:
        params, opt, step = resume.params.astype(dtype), resume.optimizer, resume.step
        opt = AdamState(opt.t, {k: a.astype(dtype) for k, a in opt.m.items()},
                        {k: a.astype(dtype) for k, a in opt.v.items()})
    else:
        params = M.init_params(model_config, dtype)
        opt = AdamState.zeros(params.weights)
        step = 0

    group = TransformGroup(train_config.geometry_group)
    if train_config.enable_geometry_module and group.class_count != model_config.rotation_classes:
        raise ParameterError(
            f"group has {group.class_count} classes but the head has {model_config.rotation_classes}"
        )
    log.info("training: %d images, N=%d, %d steps, denominator=%s", n_img, n, total_steps,
             train_config.denominator_mode)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    log_fh = open(log_path, "a" if resume else "w") if log_path else None
    records = []
    perm_epoch, perm = None, None
    try:
        while step < total_steps:
            epoch, b = divmod(step, steps_per_epoch)
            if perm_epoch != epoch:
                perm = np.random.default_rng(
                    derive_seed(train_config.global_seed, _PERM_TAG, epoch)).permutation(n_img)
                perm_epoch = epoch
            idx = perm[b * n : (b + 1) * n]
            t0 = time.perf_counter()
            batch = build_view_batch(
                [images[i] for i in idx],
                derive_seed(train_config.global_seed, _BATCH_TAG, epoch, b),
                group=group, source_indices=idx, jobs=train_config.jobs,
                predictive=train_config.enable_geometry_module,
            )
            losses, grads, pcache = loss_and_grads(params, batch, train_config)
            bad = not math.isfinite(losses.total) or not all(
                np.all(np.isfinite(g)) for g in grads.values())
            if bad:
                raise NumericalError(
                    f"non-finite loss or gradient at step {step} (epoch {epoch}): "
                    f"L_C={losses.contrastive} L_P={losses.predictive}"
                )
            weights, opt = adam_step(params.weights, grads, opt, train_config.learning_rate,
                                     train_config.beta1, train_config.beta2,
                                     train_config.adam_eps)
            params = M.ModelParams(params.config, weights, dict(params.buffers))
            if pcache is not None:
                M.update_running_stats(params, pcache)
            step += 1
            rec = {
                "step": step, "epoch": epoch, "L_C": losses.contrastive,
                "L_P": losses.predictive, "L_total": losses.total,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if checkpoint_dir and (step % steps_per_epoch == 0 or step == total_steps):
                save_checkpoint(params, opt, train_config,
                                os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt"), step)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_dir:
        save_checkpoint(params, opt, train_config, os.path.join(checkpoint_dir, "final.ckpt"), step)
    return params, records, opt
