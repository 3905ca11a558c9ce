"""MMDNN: six per-scale/per-modality branch networks fused by a seventh.

Every network follows the same layer rule: for input dimension N the hidden
layers have 3N, floor(3N/4) and 100 units, then a 2-way softmax output.
Training per network is greedy layer-wise SAE pretraining, then the output
layer alone on frozen features, then the whole network with dropout. The
assembled model is finally tuned end to end through the fusion loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .featurize import FeatureSet
from .neural_core import (
    AdamState,
    MlpParams,
    NumericError,
    ShapeError,
    adam_update,
    backward_gradients,
    dropout_mask,
    flatten_grads,
    forward_mlp,
    init_mlp,
    load_checkpoint,
    loss_cross_entropy,
    loss_reconstruction,
    save_checkpoint,
    softmax,
)

LATENT_DIM = 100
MODALITY_ORDER = ("volume", "pet")


class ConfigurationError(ValueError):
    pass


def hidden_dims(input_dim: int) -> tuple[int, int, int]:
    return (3 * input_dim, max(1, (3 * input_dim) // 4), LATENT_DIM)


@dataclass(frozen=True)
class BranchSpec:
    modality: str
    scale_index: int
    input_dim: int

    def __post_init__(self):
        if self.modality not in MODALITY_ORDER:
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be positive")

    @property
    def hidden_dims(self) -> tuple[int, int, int]:
        return hidden_dims(self.input_dim)

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, 2]

    @property
    def name(self) -> str:
        return f"{self.modality}{self.scale_index}"


def branch_specs(n_patches, modalities=MODALITY_ORDER, scales=None) -> list[BranchSpec]:
    """Branches in canonical order: volume scales ascending, then PET scales."""
    scales = range(len(n_patches)) if scales is None else sorted(scales)
    return [BranchSpec(m, s, int(n_patches[s])) for m in MODALITY_ORDER if m in modalities for s in scales]


def fusion_layer_dims(n_branches: int) -> list[int]:
    n = LATENT_DIM * n_branches
    return [n, *hidden_dims(n), 2]


@dataclass
class TrainConfig:
    batch_size: int = 50
    dropout_rate: float = 0.5
    patience_epochs: int = 50
    max_epochs: int = 500
    pretrain_epochs: int = 30
    lr_pretrain: float = 1e-3
    lr_output: float = 1e-3
    lr_finetune: float = 1e-4
    lr_joint: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "patience_epochs", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.pretrain_epochs < 0:
            raise ConfigurationError("pretrain_epochs must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        for name in ("lr_pretrain", "lr_output", "lr_finetune", "lr_joint"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *keys]))


# --------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Feature blocks aligned to a list of BranchSpecs, one row per scan."""

    blocks: list[np.ndarray]
    labels: np.ndarray
    subject_ids: np.ndarray
    scan_ids: np.ndarray
    groups: np.ndarray
    months: np.ndarray  # months to conversion, -1 when absent

    def __len__(self):
        return len(self.labels)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset([b[rows] for b in self.blocks], self.labels[rows], self.subject_ids[rows],
                       self.scan_ids[rows], self.groups[rows], self.months[rows])


def build_dataset(features: list[FeatureSet], specs: list[BranchSpec], labels=None) -> Dataset:
    blocks = []
    for sp in specs:
        rows = [getattr(fs, sp.modality)[sp.scale_index] for fs in features]
        block = np.array(rows, dtype=np.float64).reshape(len(features), -1)
        if block.shape[1] != sp.input_dim:
            raise ShapeError(f"{sp.name}: features have {block.shape[1]} columns, branch expects {sp.input_dim}")
        blocks.append(block)
    labels = np.zeros(len(features), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return Dataset(
        blocks, labels,
        np.array([fs.subject_id for fs in features]),
        np.array([fs.scan_id for fs in features]),
        np.array([fs.group for fs in features]),
        np.array([-1 if fs.months_to_conversion is None else fs.months_to_conversion for fs in features]),
    )


# --------------------------------------------------------------------------
# model


@dataclass
class MmdnnParams:
    specs: list[BranchSpec]
    branches: list[MlpParams]
    fusion: MlpParams | None
    means: list[np.ndarray]
    stds: list[np.ndarray]
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.specs) != len(self.branches):
            raise ConfigurationError("one parameter set per branch spec required")
        for sp, br in zip(self.specs, self.branches):
            if br.dims != sp.layer_dims:
                raise ShapeError(f"branch {sp.name} dims {br.dims} != {sp.layer_dims}")
        if self.fusion is not None and self.fusion.dims != fusion_layer_dims(len(self.specs)):
            raise ShapeError(f"fusion dims {self.fusion.dims} != {fusion_layer_dims(len(self.specs))}")

    def copy(self) -> "MmdnnParams":
        return MmdnnParams(list(self.specs), [b.copy() for b in self.branches],
                           None if self.fusion is None else self.fusion.copy(),
                           [m.copy() for m in self.means], [s.copy() for s in self.stds], dict(self.stages))

    def tensors(self) -> list[np.ndarray]:
        out = []
        for b in self.branches:
            out += b.tensors()
        if self.fusion is not None:
            out += self.fusion.tensors()
        return out


def init_mmdnn(specs: list[BranchSpec], seed: int = 0, fuse: bool | None = None) -> MmdnnParams:
    """Fresh He-initialized model; the fusion net exists when there are >= 2 branches."""
    if not specs:
        raise ConfigurationError("at least one branch is required")
    fuse = len(specs) > 1 if fuse is None else fuse
    branches = [init_mlp(sp.layer_dims, stream(seed, 0, i)) for i, sp in enumerate(specs)]
    fusion = init_mlp(fusion_layer_dims(len(specs)), stream(seed, 1)) if fuse else None
    means = [np.zeros(sp.input_dim) for sp in specs]
    stds = [np.ones(sp.input_dim) for sp in specs]
    return MmdnnParams(list(specs), branches, fusion, means, stds)


def fit_normalization(params: MmdnnParams, blocks: list[np.ndarray]) -> None:
    """Store per-feature training mean/std (std floor 1e-8 -> 1)."""
    params.means, params.stds = [], []
    for b in blocks:
        std = b.std(axis=0)
        params.means.append(b.mean(axis=0))
        params.stds.append(np.where(std > 1e-8, std, 1.0))


def normalize(params: MmdnnParams, blocks: list[np.ndarray]) -> list[np.ndarray]:
    if len(blocks) != len(params.specs):
        raise ConfigurationError(f"expected {len(params.specs)} feature blocks, got {len(blocks)}")
    out = []
    for sp, b, m, s in zip(params.specs, blocks, params.means, params.stds):
        if b.ndim != 2 or b.shape[1] != sp.input_dim:
            raise ShapeError(f"{sp.name}: feature block {b.shape} does not match input dim {sp.input_dim}")
        out.append(((b - m) / s).astype(np.float32))
    return out


# --------------------------------------------------------------------------
# training loops


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # argmax takes the first maximum, i.e. ties go to class 0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class FitLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _early_stopping(step_epoch, evaluate, snapshot, restore, cfg: TrainConfig, tag: str) -> FitLog:
    """Shared epoch loop: epoch 0 is the starting point, best snapshot is restored."""
    log = FitLog()
    best = evaluate()
    log.epochs.append(0)
    log.train_loss.append(float("nan"))
    log.val_accuracy.append(best)
    log.best_epoch, log.best_accuracy = 0, best
    saved = snapshot()
    for epoch in range(1, cfg.max_epochs + 1):
        try:
            loss = step_epoch()
        except NumericError as exc:
            raise NumericError(f"{tag}: {exc}") from exc
        acc = evaluate()
        log.epochs.append(epoch)
        log.train_loss.append(loss)
        log.val_accuracy.append(acc)
        if acc > log.best_accuracy:
            log.best_epoch, log.best_accuracy = epoch, acc
            saved = snapshot()
        if epoch - log.best_epoch >= cfg.patience_epochs:
            break
    restore(saved)
    return log


def _hidden_codes(params: MlpParams, x: np.ndarray, n_layers: int) -> np.ndarray:
    if n_layers == 0:
        return x
    return forward_mlp(params, x, n_layers=n_layers)[0]


@dataclass
class PretrainLog:
    input_dims: list[int] = field(default_factory=list)
    initial_loss: list[float] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ae_loss_and_grads(W, b, c, x, relu_out):
    pre_y = x @ W.T + b
    y = np.maximum(pre_y, 0)
    pre_z = y @ W + c
    z = np.maximum(pre_z, 0) if relu_out else pre_z
    loss, dz = loss_reconstruction(x, z)
    if relu_out:
        dz = dz * (pre_z > 0)
    dW = y.T @ dz
    dc = dz.sum(axis=0)
    dy = (dz @ W.T) * (pre_y > 0)
    dW += dy.T @ x
    db = dy.sum(axis=0)
    return loss, dW, db, dc


def _ae_loss(W, b, c, x, relu_out) -> float:
    y = np.maximum(x @ W.T + b, 0)
    z = y @ W + c
    if relu_out:
        z = np.maximum(z, 0)
    return loss_reconstruction(x, z)[0]


def pretrain_sae(branch: MlpParams, inputs: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                 signed_inputs: bool = True):
    """Greedy layer-wise tied-weight autoencoder pretraining of the hidden layers.

    Layer ``l`` is trained as ``z = s(W^T relu(W h + b) + c)`` on the codes
    of layers ``0..l-1`` with squared-error loss; ``s`` is ReLU except on
    the first layer when its inputs are signed (z-scored features), where
    it is the identity. Returns ``(params, PretrainLog)``.
    """
    params = branch.copy()
    log = PretrainLog()
    if cfg.pretrain_epochs == 0:
        return params, log
    x = np.asarray(inputs, dtype=params.weights[0].dtype)
    for l in range(params.n_layers - 1):
        codes = _hidden_codes(params, x, l)
        W, b = params.weights[l], params.biases[l]
        c = codes.mean(axis=0).astype(W.dtype)
        relu_out = not (l == 0 and signed_inputs)
        state = AdamState.for_tensors([W, b, c], cfg.lr_pretrain)
        log.input_dims.append(codes.shape[1])
        log.initial_loss.append(_ae_loss(W, b, c, codes, relu_out))
        for _ in range(cfg.pretrain_epochs):
            for idx in _batches(len(codes), cfg.batch_size, rng):
                loss, dW, db, dc = _ae_loss_and_grads(W, b, c, codes[idx], relu_out)
                if not np.isfinite(loss):
                    raise NumericError(f"SAE pretraining diverged at layer {l}")
                try:
                    adam_update([W, b, c], [dW, db, dc], state)
                except NumericError as exc:
                    raise NumericError(f"SAE pretraining layer {l}: {exc}") from exc
        log.final_loss.append(_ae_loss(W, b, c, codes, relu_out))
    return params, log


def _train_output_layer(params: MlpParams, x, y, xval, yval, cfg, rng) -> FitLog:
    """Stage A: softmax layer only, hidden layers frozen (features cached)."""
    last = params.n_layers - 1
    h = _hidden_codes(params, x, last)
    hval = _hidden_codes(params, xval, last)
    W, b = params.weights[last], params.biases[last]
    state = AdamState.for_tensors([W, b], cfg.lr_output)

    def step_epoch():
        total = 0.0
        for idx in _batches(len(h), cfg.batch_size, rng):
            logits = h[idx] @ W.T + b
            loss, dlog = loss_cross_entropy(logits, y[idx])
            adam_update([W, b], [dlog.T @ h[idx], dlog.sum(axis=0)], state)
            total += loss * len(idx)
        return total / len(h)

    return _early_stopping(
        step_epoch,
        lambda: accuracy(hval @ W.T + b, yval),
        lambda: (W.copy(), b.copy()),
        lambda s: (W.__setitem__(..., s[0]), b.__setitem__(..., s[1])),
        cfg, "output layer",
    )


def _dropout_masks(params: MlpParams, n: int, rate: float, rng, n_hidden: int | None = None):
    n_hidden = params.n_layers - 1 if n_hidden is None else n_hidden
    if rate == 0:
        return None
    return [dropout_mask((n, params.dims[l + 1]), rate, rng) for l in range(n_hidden)]


def _train_full(params: MlpParams, x, y, xval, yval, cfg, rng) -> FitLog:
    """Stage B: whole network with dropout on every hidden layer."""
    state = AdamState.for_params(params, cfg.lr_finetune)
    tensors = params.tensors()

    def step_epoch():
        total = 0.0
        for idx in _batches(len(x), cfg.batch_size, rng):
            masks = _dropout_masks(params, len(idx), cfg.dropout_rate, rng)
            logits, cache = forward_mlp(params, x[idx], masks)
            loss, dlog = loss_cross_entropy(logits, y[idx])
            grads, _ = backward_gradients(params, cache, dlog)
            adam_update(tensors, flatten_grads(grads), state)
            total += loss * len(idx)
        return total / len(x)

    def restore(saved):
        for t, s in zip(tensors, saved):
            t[...] = s

    return _early_stopping(
        step_epoch,
        lambda: accuracy(forward_mlp(params, xval)[0], yval),
        lambda: [t.copy() for t in tensors],
        restore, cfg, "fine-tuning",
    )


def train_supervised(params: MlpParams, x, y, xval, yval, cfg: TrainConfig, rng):
    """Output layer first with hidden layers frozen, then the whole network.

    Returns ``(params, {"output": FitLog, "full": FitLog})``; the returned
    parameters are the best-validation snapshot of the full stage.
    """
    if len(yval) == 0:
        raise ConfigurationError("validation set is empty")
    params = params.copy()
    x = np.asarray(x, dtype=np.float32)
    xval = np.asarray(xval, dtype=np.float32)
    log_a = _train_output_layer(params, x, y, xval, yval, cfg, rng)
    log_b = _train_full(params, x, y, xval, yval, cfg, rng)
    return params, {"output": log_a, "full": log_b}


def train_branch(branch: MlpParams, x, y, xval, yval, cfg: TrainConfig, rng):
    """Staged supervised training of one (pretrained) branch network."""
    return train_supervised(branch, x, y, xval, yval, cfg, rng)


def fuse_latents(params: MmdnnParams, blocks: list[np.ndarray], normalized: bool = False) -> np.ndarray:
    """Concatenate each branch's third-hidden-layer code, in branch order, without dropout."""
    if any(b is None for b in params.branches):
        raise ConfigurationError("all branches must be trained before fusion")
    xs = blocks if normalized else normalize(params, blocks)
    return np.concatenate([_hidden_codes(br, x, br.n_layers - 1) for br, x in zip(params.branches, xs)], axis=1)


def train_fusion(params: MmdnnParams, fx, y, fxval, yval, cfg: TrainConfig, rng):
    """SAE pretraining plus staged supervised training of the fusion network."""
    if params.fusion is None:
        raise ConfigurationError("model has no fusion network")
    params = params.copy()
    fusion, pre_log = pretrain_sae(params.fusion, fx, cfg, rng, signed_inputs=False)
    fusion, fit_logs = train_supervised(fusion, fx, y, fxval, yval, cfg, rng)
    params.fusion = fusion
    params.stages["fusion"] = True
    return params, {"pretrain": pre_log.to_dict(), **{k: v.to_dict() for k, v in fit_logs.items()}}


def _joint_forward(params: MmdnnParams, xs, masks=None):
    codes, caches = [], []
    for i, (br, x) in enumerate(zip(params.branches, xs)):
        h, cache = forward_mlp(br, x, None if masks is None else masks[i], n_layers=br.n_layers - 1)
        codes.append(h)
        caches.append(cache)
    fused = np.concatenate(codes, axis=1)
    logits, fcache = forward_mlp(params.fusion, fused, None if masks is None else masks[-1])
    return logits, caches, fcache


def joint_finetune(params: MmdnnParams, blocks, y, val_blocks, yval, cfg: TrainConfig, rng,
                   normalized: bool = False, grad_norms: list | None = None):
    """End-to-end tuning through the fusion loss; branch softmax layers are left as is.

    Returns ``(params, FitLog)`` with the best-validation snapshot restored.
    ``grad_norms`` (if given) receives the first-layer gradient norm of every
    branch for each minibatch.
    """
    if params.fusion is None:
        raise ConfigurationError("joint tuning requires a fusion network")
    if len(yval) == 0:
        raise ConfigurationError("validation set is empty")
    params = params.copy()
    xs = blocks if normalized else normalize(params, blocks)
    xvals = val_blocks if normalized else normalize(params, val_blocks)
    n = len(y)
    tensors = []
    for br in params.branches:
        tensors += br.tensors()
    tensors += params.fusion.tensors()
    state = AdamState.for_tensors(tensors, cfg.lr_joint)

    def step_epoch():
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            masks = None
            if cfg.dropout_rate > 0:
                masks = [_dropout_masks(br, len(idx), cfg.dropout_rate, rng) for br in params.branches]
                masks.append(_dropout_masks(params.fusion, len(idx), cfg.dropout_rate, rng))
            logits, caches, fcache = _joint_forward(params, [x[idx] for x in xs], masks)
            loss, dlog = loss_cross_entropy(logits, y[idx])
            fgrads, dfused = backward_gradients(params.fusion, fcache, dlog, need_input_grad=True)
            grads = []
            for i, (br, cache) in enumerate(zip(params.branches, caches)):
                bgrads, _ = backward_gradients(br, cache, dfused[:, i * LATENT_DIM:(i + 1) * LATENT_DIM])
                grads += flatten_grads(bgrads)
                if grad_norms is not None:
                    grad_norms.append(float(np.linalg.norm(bgrads[0][0])))
            grads += flatten_grads(fgrads)
            adam_update(tensors, grads, state)
            total += loss * len(idx)
        return total / n

    def restore(saved):
        for t, s in zip(tensors, saved):
            t[...] = s

    log = _early_stopping(
        step_epoch,
        lambda: accuracy(_joint_forward(params, xvals)[0], yval),
        lambda: [t.copy() for t in tensors],
        restore, cfg, "joint tuning",
    )
    params.stages["joint"] = True
    return params, log


def predict_proba(params: MmdnnParams, blocks: list[np.ndarray]) -> np.ndarray:
    """Class probabilities (float64 rows summing to 1); dropout-free, no mutation."""
    xs = normalize(params, blocks)
    if params.fusion is None:
        logits = forward_mlp(params.branches[0], xs[0])[0]
    else:
        logits = _joint_forward(params, xs)[0]
    return softmax(logits.astype(np.float64))


def train_mmdnn(train: Dataset, val: Dataset, specs: list[BranchSpec], cfg: TrainConfig,
                seed: int | None = None, joint: bool = True):
    """Full pipeline for one network: branches, fusion, joint tuning.

    Each branch draws from the stream ``(seed, 2, branch index)`` so branch
    results do not depend on training order. Returns ``(params, log)``.
    """
    seed = cfg.seed if seed is None else seed
    if len(val) == 0:
        raise ConfigurationError("validation set is empty")
    params = init_mmdnn(specs, seed)
    fit_normalization(params, train.blocks)
    xs = normalize(params, train.blocks)
    xvals = normalize(params, val.blocks)
    log: dict = {"branches": []}
    for i, sp in enumerate(specs):
        rng = stream(seed, 2, i)
        br, pre_log = pretrain_sae(params.branches[i], xs[i], cfg, rng, signed_inputs=True)
        br, fit_logs = train_branch(br, xs[i], train.labels, xvals[i], val.labels, cfg, rng)
        params.branches[i] = br
        log["branches"].append({"name": sp.name, "pretrain": pre_log.to_dict(),
                                **{k: v.to_dict() for k, v in fit_logs.items()}})
    params.stages["branches"] = True
    if params.fusion is not None:
        fx = fuse_latents(params, xs, normalized=True)
        fxval = fuse_latents(params, xvals, normalized=True)
        params, log["fusion"] = train_fusion(params, fx, train.labels, fxval, val.labels, cfg, stream(seed, 3))
        if joint:
            params, jlog = joint_finetune(params, xs, train.labels, xvals, val.labels, cfg,
                                          stream(seed, 4), normalized=True)
            log["joint"] = jlog.to_dict()
    return params, log


# --------------------------------------------------------------------------
# checkpoints


def save_mmdnn(params: MmdnnParams, directory, cfg: TrainConfig | None = None, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, br in enumerate(params.branches):
        save_checkpoint(directory / f"branch_{i}", br)
    if params.fusion is not None:
        save_checkpoint(directory / "fusion", params.fusion)
    manifest = {
        "branches": [asdict(sp) for sp in params.specs],
        "fusion": params.fusion is not None,
        "normalization": {"mean": [m.tolist() for m in params.means], "std": [s.tolist() for s in params.stds]},
        "stages": params.stages,
        "config": None if cfg is None else cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return path


def load_mmdnn(directory) -> MmdnnParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    specs = [BranchSpec(**d) for d in manifest["branches"]]
    branches = [load_checkpoint(directory / f"branch_{i}")[0] for i in range(len(specs))]
    fusion = load_checkpoint(directory / "fusion")[0] if manifest["fusion"] else None
    norm = manifest["normalization"]
    return MmdnnParams(specs, branches, fusion, [np.array(m) for m in norm["mean"]],
                       [np.array(s) for s in norm["std"]], manifest["stages"])
