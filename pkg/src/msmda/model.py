"""Multi-branch adaptation network and its training step.

A shared 3-layer MLP (common feature extractor) feeds N branches, each a
single linear+LeakyReLU feature layer followed by a bare linear classifier.
Each branch aligns its source with the target via kernel MMD on the branch
features; classification loss is computed on source logits, and the
branches' target predictions are pulled together by the discrepancy loss.
Inference averages the branch softmax outputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError, ValidationError
from .losses import (
    KernelSpec,
    LossBreakdown,
    alpha_schedule,
    classification_loss,
    discrepancy_loss,
    mmd_squared,
    total_loss,
)
from .neuralcore import (
    LinearLayer,
    Parameter,
    adam_step,
    as_matrix,
    leaky_relu,
    leaky_relu_backward,
    softmax,
    softmax_backward,
)

CHECKPOINT_MAGIC = b"MSMDA1"


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions and initialization seed."""

    num_branches: int
    input_dim: int = 310
    cfe_dims: tuple[int, ...] = (256, 128, 64)
    dsfe_dim: int = 32
    num_classes: int = 3
    leaky_slope: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cfe_dims", tuple(int(d) for d in self.cfe_dims))
        if self.num_branches < 1:
            raise ValidationError("num_branches must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.input_dim < 1 or self.dsfe_dim < 1:
            raise ValidationError("input_dim and dsfe_dim must be >= 1")
        if not self.cfe_dims or any(d < 1 for d in self.cfe_dims):
            raise ValidationError("cfe_dims must be a nonempty tuple of positive widths")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValidationError("leaky_slope must be in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop settings, including the ablation switches.

    ``beta_weight`` is by default a ratio applied to the ramped adaptation
    weight (effective disc weight = beta_weight * alpha); set
    ``beta_absolute`` to use it as a raw coefficient instead.
    ``disc_start_fraction`` delays the discrepancy term until that fraction
    of the run has elapsed.
    """

    epochs: int = 200
    batch_size: int = 256
    lr: float = 0.01
    beta_weight: float = 0.01
    disc_start_fraction: float = 0.0
    ablate_mmd: bool = False
    ablate_disc: bool = False
    iterations_per_epoch: int | None = None
    rng_seed: int = 0
    beta_absolute: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0.0 <= self.disc_start_fraction <= 1.0:
            raise ValidationError("disc_start_fraction must be in [0, 1]")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ValidationError("iterations_per_epoch must be >= 1 or None")


def loss_weights(train: TrainConfig, epoch_index: int) -> tuple[float, float]:
    """Applied (mmd, disc) weights for a 0-based epoch index."""
    a = alpha_schedule(epoch_index, train.epochs)
    w_mmd = 0.0 if train.ablate_mmd else a
    disc_active = epoch_index >= train.disc_start_fraction * train.epochs
    base = train.beta_weight if train.beta_absolute else train.beta_weight * a
    w_disc = base if (disc_active and not train.ablate_disc) else 0.0
    return w_mmd, w_disc


@dataclass
class Branch:
    dsfe: LinearLayer
    dsc: LinearLayer


@dataclass
class TrainStepState:
    """Intermediate tensors of one loss evaluation, for inspection."""

    branch_source_features: list[np.ndarray]
    branch_target_features: list[np.ndarray]
    branch_mmd: list[float]


class MsMdaModel:
    """Common extractor plus N (feature layer, classifier) branches."""

    def __init__(self, config: ModelConfig, cfe: list[LinearLayer], branches: list[Branch]):
        if len(branches) != config.num_branches:
            raise ValidationError(
                f"{len(branches)} branches built for num_branches={config.num_branches}"
            )
        self.config = config
        self.cfe = cfe
        self.branches = branches

    def parameters(self) -> list[Parameter]:
        params = []
        for layer in self.cfe:
            params.extend(layer.parameters())
        for branch in self.branches:
            params.extend(branch.dsfe.parameters())
            params.extend(branch.dsc.parameters())
        return params

    @property
    def num_branches(self) -> int:
        return self.config.num_branches


def init_model(config: ModelConfig) -> MsMdaModel:
    """Build a model with fan-in-uniform weights from the config seed."""
    rng = np.random.default_rng(config.rng_seed)
    dims = (config.input_dim,) + config.cfe_dims
    cfe = [LinearLayer.init(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
    branches = []
    for _ in range(config.num_branches):
        dsfe = LinearLayer.init(config.cfe_dims[-1], config.dsfe_dim, rng)
        dsc = LinearLayer.init(config.dsfe_dim, config.num_classes, rng)
        branches.append(Branch(dsfe=dsfe, dsc=dsc))
    return MsMdaModel(config, cfe, branches)


def _cfe_forward(model: MsMdaModel, x: np.ndarray, cache: bool):
    """Run the common extractor; returns (output, pre-activations)."""
    slope = model.config.leaky_slope
    pres = []
    h = x
    for layer in model.cfe:
        z = layer.forward(h, cache=cache)
        pres.append(z)
        h = leaky_relu(z, slope)
    return h, pres


def _validate_batches(model, source_batches, target_batch):
    if len(source_batches) != model.num_branches:
        raise ValidationError(
            f"{len(source_batches)} source batches for a {model.num_branches}-branch model"
        )
    dim = model.config.input_dim
    for i, (feats, labels) in enumerate(source_batches):
        feats = as_matrix(feats, f"source batch {i}")
        if feats.shape[1] != dim:
            raise ShapeError(f"source batch {i} has dim {feats.shape[1]}, expected {dim}")
        if feats.shape[0] == 0:
            raise ValidationError(f"source batch {i} is empty")
    target_batch = as_matrix(target_batch, "target batch")
    if target_batch.shape[1] != dim:
        raise ShapeError(f"target batch has dim {target_batch.shape[1]}, expected {dim}")
    if target_batch.shape[0] == 0:
        raise ValidationError("target batch is empty")


def compute_losses(
    model: MsMdaModel,
    source_batches,
    target_batch,
    alpha: float,
    beta: float,
    kernel: KernelSpec | None = None,
    accumulate_grads: bool = False,
    return_state: bool = False,
):
    """Forward (and optionally backward) pass of one training step.

    Runs the common extractor once on all batches stacked together, then
    each branch on (its source, target). Per-branch MMD values are averaged
    into the mmd component; classification sums over branches; discrepancy
    compares the branches' target softmax outputs. With
    ``accumulate_grads`` the weighted total is backpropagated into every
    parameter's grad buffer (no optimizer step).
    """
    kernel = kernel or KernelSpec()
    _validate_batches(model, source_batches, target_batch)
    slope = model.config.leaky_slope
    n_branches = model.num_branches

    source_feats = [as_matrix(f, "source features") for f, _ in source_batches]
    source_labels = [labels for _, labels in source_batches]
    target = as_matrix(target_batch, "target batch")
    sizes = [f.shape[0] for f in source_feats] + [target.shape[0]]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    stacked = np.vstack(source_feats + [target])
    q, cfe_pres = _cfe_forward(model, stacked, cache=accumulate_grads)
    q_target = q[offsets[-2]:offsets[-1]]

    branch_logits_src = []
    branch_probs_tgt = []
    branch_state = []
    mmd_values = []
    mmd_grads = []
    for i, branch in enumerate(model.branches):
        q_src = q[offsets[i]:offsets[i + 1]]
        joined = np.vstack([q_src, q_target])
        z1 = branch.dsfe.forward(joined, cache=accumulate_grads)
        r = leaky_relu(z1, slope)
        n_src = q_src.shape[0]
        r_src, r_tgt = r[:n_src], r[n_src:]
        value, g_src, g_tgt = mmd_squared(r_src, r_tgt, kernel)
        mmd_values.append(value)
        mmd_grads.append((g_src, g_tgt))
        logits = branch.dsc.forward(r, cache=accumulate_grads)
        branch_logits_src.append(logits[:n_src])
        branch_probs_tgt.append(softmax(logits[n_src:]))
        branch_state.append((z1, n_src, r_src, r_tgt))

    cls_value, cls_grads = classification_loss(branch_logits_src, source_labels)
    disc_value, disc_grads = discrepancy_loss(branch_probs_tgt)
    mmd_value = float(np.mean(mmd_values))
    finite = all(math.isfinite(v) for v in (cls_value, mmd_value, disc_value))
    if finite:
        breakdown = total_loss(cls_value, mmd_value, disc_value, alpha, beta)
    else:
        # diverged run: report the damage instead of raising mid-training
        breakdown = LossBreakdown(cls=cls_value, mmd=mmd_value, disc=disc_value,
                                  total=float("nan"), alpha=alpha, beta=beta)

    if accumulate_grads and finite:
        grad_q = np.zeros_like(q)
        for i, branch in enumerate(model.branches):
            z1, n_src, _, _ = branch_state[i]
            g_logits_tgt = softmax_backward(beta * disc_grads[i], branch_probs_tgt[i])
            g_r = branch.dsc.backward(np.vstack([cls_grads[i], g_logits_tgt]))
            g_src, g_tgt = mmd_grads[i]
            # mmd component is the branch mean, so each branch carries alpha/N
            g_r[:n_src] += (alpha / n_branches) * g_src
            g_r[n_src:] += (alpha / n_branches) * g_tgt
            g_joined = branch.dsfe.backward(leaky_relu_backward(g_r, z1, slope))
            grad_q[offsets[i]:offsets[i + 1]] += g_joined[:n_src]
            grad_q[offsets[-2]:offsets[-1]] += g_joined[n_src:]
        g = grad_q
        for layer, z in zip(reversed(model.cfe), reversed(cfe_pres)):
            g = layer.backward(leaky_relu_backward(g, z, slope))

    if return_state:
        state = TrainStepState(
            branch_source_features=[s[2] for s in branch_state],
            branch_target_features=[s[3] for s in branch_state],
            branch_mmd=mmd_values,
        )
        return breakdown, state
    return breakdown


def train_step(
    model: MsMdaModel,
    source_batches,
    target_batch,
    alpha: float,
    beta: float,
    lr: float = 0.01,
    kernel: KernelSpec | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> LossBreakdown:
    """One full optimization step: losses, backprop, Adam on every parameter.

    A non-finite loss skips the update and is returned as-is so the caller
    can abort the run.
    """
    breakdown = compute_losses(
        model, source_batches, target_batch, alpha, beta,
        kernel=kernel, accumulate_grads=True,
    )
    if not math.isfinite(breakdown.total):
        return breakdown
    for param in model.parameters():
        adam_step(param, lr, beta1=beta1, beta2=beta2, eps=eps)
    return breakdown


def predict(model: MsMdaModel, target_features):
    """Average the branch softmax outputs; ties go to the lowest class.

    Returns (avg_probs, labels, per_branch_probs) without touching any
    cached layer state.
    """
    x = as_matrix(target_features, "target features")
    if x.shape[1] != model.config.input_dim:
        raise ShapeError(
            f"features have dim {x.shape[1]}, model expects {model.config.input_dim}"
        )
    slope = model.config.leaky_slope
    q, _ = _cfe_forward(model, x, cache=False)
    per_branch = []
    for branch in model.branches:
        r = leaky_relu(branch.dsfe.forward(q, cache=False), slope)
        per_branch.append(softmax(branch.dsc.forward(r, cache=False)))
    avg = np.mean(per_branch, axis=0)
    labels = np.argmax(avg, axis=1).astype(np.int64)
    return avg, labels, per_branch


def extract_branch_features(model: MsMdaModel, features, branch: int) -> np.ndarray:
    """Branch feature-layer output (the classifier's input), state-free."""
    if not 0 <= branch < model.num_branches:
        raise ValidationError(
            f"branch {branch} out of range for {model.num_branches} branches"
        )
    x = as_matrix(features, "features")
    if x.shape[1] != model.config.input_dim:
        raise ShapeError(
            f"features have dim {x.shape[1]}, model expects {model.config.input_dim}"
        )
    slope = model.config.leaky_slope
    q, _ = _cfe_forward(model, x, cache=False)
    b = model.branches[branch]
    return leaky_relu(b.dsfe.forward(q, cache=False), slope)


def save_checkpoint(model: MsMdaModel, path) -> None:
    """Versioned little-endian binary dump of config and parameter values.

    Layout: magic, config record, then parameters in fixed traversal order
    (CFE layers, then branches in index order; weight before bias,
    row-major float64). Round-trips bit-exactly.
    """
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(
            "<IIIIIdq",
            cfg.input_dim,
            len(cfg.cfe_dims),
            cfg.dsfe_dim,
            cfg.num_classes,
            cfg.num_branches,
            cfg.leaky_slope,
            cfg.rng_seed,
        ))
        fh.write(struct.pack(f"<{len(cfg.cfe_dims)}I", *cfg.cfe_dims))
        for layer in _traversal(model):
            for param in (layer.weight, layer.bias):
                fh.write(np.ascontiguousarray(param.value, dtype="<f8").tobytes())


def _traversal(model: MsMdaModel):
    yield from model.cfe
    for branch in model.branches:
        yield branch.dsfe
        yield branch.dsc


def load_checkpoint(path) -> MsMdaModel:
    """Rebuild a model from a checkpoint; optimizer state starts fresh."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    head_fmt = "<IIIIIdq"
    head_size = struct.calcsize(head_fmt)
    try:
        input_dim, n_cfe, dsfe_dim, num_classes, num_branches, slope, seed = (
            struct.unpack_from(head_fmt, blob, offset)
        )
        offset += head_size
        cfe_dims = struct.unpack_from(f"<{n_cfe}I", blob, offset)
        offset += n_cfe * 4
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint header") from exc
    config = ModelConfig(
        num_branches=num_branches,
        input_dim=input_dim,
        cfe_dims=cfe_dims,
        dsfe_dim=dsfe_dim,
        num_classes=num_classes,
        leaky_slope=slope,
        rng_seed=seed,
    )
    model = init_model(config)
    for layer in _traversal(model):
        for param in (layer.weight, layer.bias):
            count = param.value.size
            end = offset + count * 8
            if end > len(blob):
                raise DataError(f"{path}: truncated checkpoint payload")
            param.value[...] = np.frombuffer(
                blob[offset:end], dtype="<f8"
            ).reshape(param.value.shape)
            offset += count * 8
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes in checkpoint")
    return model
