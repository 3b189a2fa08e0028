"""Optimizer, training loop, and checkpoint persistence.

Training is deterministic given the seed: numpy arithmetic is ordered, data
sampling flows from one generator, and validation happens at fixed steps.
Checkpoints are a flat little-endian float32 blob plus a JSON manifest
listing layer names, shapes, offsets, and the model hyperparameters.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from .models import MPDModel, MIRModel

__all__ = ["Adam", "TrainConfig", "TrainHistory", "train",
           "save_checkpoint", "load_checkpoint"]

CKPT_MAGIC = "HELIXCT-CKPT"


class Adam:
    """Stochastic gradient descent with adaptive moment estimates."""

    def __init__(self, params, lr=1.0e-4, betas=(0.9, 0.999), eps=1.0e-8):
        self.params = [t for _, t in params]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1.0e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1.0e-8
    val_every: int = 100
    patience: int = 5
    lr_drop: float = 0.1
    min_lr: float = 1.0e-5


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def to_csv(self, path):
        val = dict(zip(self.val_steps, self.val_loss))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss,lr,val_loss\n")
            for s, l, r in zip(self.steps, self.loss, self.lr):
                v = val.get(s, "")
                fh.write(f"{s},{l:.10g},{r:.10g},{v if v == '' else format(v, '.10g')}\n")


def train(model, sample_batch, forward_loss, cfg, rng, val_batch=None,
          start_step=0):
    """Minimize the L1 objective with Adam and a plateau learning-rate drop.

    sample_batch(rng, batch_size) supplies one training batch;
    forward_loss(model, batch) returns the scalar loss Tensor.  When
    ``val_batch`` is given, the loss on it is evaluated every
    ``cfg.val_every`` steps and the learning rate drops by ``cfg.lr_drop``
    (not below ``cfg.min_lr``) after ``cfg.patience`` rounds without
    improvement.  ``start_step`` continues the step numbering of a resumed
    checkpoint.
    """
    opt = Adam(model.params(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    hist = TrainHistory()
    best_val = np.inf
    stall = 0
    for step in range(start_step + 1, start_step + cfg.steps + 1):
        batch = sample_batch(rng, cfg.batch_size)
        opt.zero_grad()
        loss = forward_loss(model, batch)
        lv = loss.item()
        if not np.isfinite(lv):
            raise NumericError(
                f"training diverged at step {step}: loss={lv!r}, lr={opt.lr:g}")
        loss.backward()
        opt.step()
        hist.steps.append(step)
        hist.loss.append(lv)
        hist.lr.append(opt.lr)
        if val_batch is not None and step % cfg.val_every == 0:
            vloss = forward_loss(model, val_batch).item()
            hist.val_steps.append(step)
            hist.val_loss.append(vloss)
            if vloss < best_val - 1e-12:
                best_val = vloss
                stall = 0
            else:
                stall += 1
                if stall >= cfg.patience and opt.lr > cfg.min_lr:
                    opt.lr = max(opt.lr * cfg.lr_drop, cfg.min_lr)
                    stall = 0
    return hist


def save_checkpoint(model, base_path, seed=None, step=None):
    """Write <base>.f32 (params) and <base>.json (manifest)."""
    params = model.params()
    layers = []
    offset = 0
    blobs = []
    for name, t in params:
        arr = np.asarray(t.data, dtype="<f4")
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.ravel())
    manifest = dict(model.manifest())
    manifest.update({"magic": CKPT_MAGIC, "format_version": 1,
                     "layers": layers, "total_values": offset,
                     "training_seed": seed, "step": step})
    np.concatenate(blobs).tofile(str(base_path) + ".f32")
    with open(str(base_path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(base_path):
    """Rebuild a model from its manifest and parameter blob."""
    with open(str(base_path) + ".json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("magic") != CKPT_MAGIC:
        raise ConfigError(f"{base_path}.json is not a checkpoint manifest")
    rng = np.random.default_rng(0)
    kind = manifest["kind"]
    if kind == "mpd":
        model = MPDModel(rng, window_half_width=manifest["F"],
                         widths=tuple(manifest["widths"]),
                         frame_scale=manifest["frame_scale"],
                         prior_scale=manifest["prior_scale"],
                         priors_to_step2=manifest["priors_to_step2"])
    elif kind == "mir":
        model = MIRModel(rng, window_half_width=manifest["F"],
                         widths=tuple(manifest["widths"]),
                         decoupled=manifest["decoupled"],
                         image_scale=manifest["image_scale"])
    else:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    blob = np.fromfile(str(base_path) + ".f32", dtype="<f4")
    if blob.size != manifest["total_values"]:
        raise ConfigError("checkpoint blob size does not match its manifest")
    by_name = dict(model.params())
    for entry in manifest["layers"]:
        t = by_name[entry["name"]]
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        vals = blob[entry["offset"]:entry["offset"] + n]
        t.data = vals.astype(np.float64).reshape(entry["shape"])
    return model, manifest
