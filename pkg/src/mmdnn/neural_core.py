"""Dense ReLU networks in numpy: forward/backward, losses, Adam, dropout.

Weights are stored ``out x in`` and applied to row-major batches as
``x @ W.T + b``. Hidden layers use ReLU; the last layer is linear (logits).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_CLASSES = 2


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != layer {i - 1} output {self.weights[i - 1].shape[0]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_mlp(dims, rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer (post-dropout)
    active: list[np.ndarray] = field(default_factory=list)  # ReLU gate of each hidden layer
    masks: list[np.ndarray | None] = field(default_factory=list)
    n_run: int = 0
    final_linear: bool = True


def forward_mlp(params: MlpParams, inputs: np.ndarray, masks=None, n_layers: int | None = None):
    """Run the first ``n_layers`` layers (default all).

    When all layers run, the last is linear and its output are the logits;
    otherwise every layer run is a hidden ReLU layer and the output is the
    (dropped-out) activation of the last one. ``masks[l]`` multiplies hidden
    layer ``l``'s activation.

    Returns ``(output, cache)``.
    """
    x = np.asarray(inputs)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match input dim {params.weights[0].shape[1]}")
    n_run = params.n_layers if n_layers is None else n_layers
    final_linear = n_run == params.n_layers
    cache = ForwardCache(n_run=n_run, final_linear=final_linear)
    h = x
    for l in range(n_run):
        cache.inputs.append(h)
        z = h @ params.weights[l].T + params.biases[l]
        if l == params.n_layers - 1:
            h = z
            break
        gate = z > 0
        h = np.where(gate, z, 0).astype(z.dtype, copy=False)
        cache.active.append(gate)
        mask = None if masks is None else masks[l]
        if mask is not None:
            h = h * mask
        cache.masks.append(mask)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite network output")
    return h, cache


def backward_gradients(params: MlpParams, cache: ForwardCache, d_out: np.ndarray, need_input_grad=False):
    """Reverse-mode gradients for the layers run in ``cache``.

    Returns ``(grads, d_input)`` where ``grads`` is an MlpParams-shaped list
    of ``(dW, db)`` pairs (``None`` for layers that were not run) and
    ``d_input`` is the gradient with respect to the network input when
    requested.
    """
    if d_out.shape[0] != cache.inputs[0].shape[0]:
        raise ShapeError("gradient batch size does not match the cached forward pass")
    grads: list = [None] * params.n_layers
    d = d_out
    for l in reversed(range(cache.n_run)):
        if not (cache.final_linear and l == params.n_layers - 1):
            if cache.masks[l] is not None:
                d = d * cache.masks[l]
            d = d * cache.active[l]
        grads[l] = (d.T @ cache.inputs[l], d.sum(axis=0))
        if l or need_input_grad:
            d = d @ params.weights[l]
    return grads, (d if need_input_grad else None)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != N_CLASSES or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_norm
    loss = float(-log_p.mean())
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1
    return loss, dlogits / n


def loss_reconstruction(x: np.ndarray, z: np.ndarray):
    """Batch mean of ``0.5 * ||x - z||^2`` and its gradient with respect to ``z``."""
    if x.shape != z.shape:
        raise ShapeError(f"reconstruction shape {z.shape} != input shape {x.shape}")
    diff = z - x
    n = x.shape[0]
    return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / n), diff / n


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1 - rate) keeps scaled by 1 / (1 - rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_tensors(cls, tensors, learning_rate=1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors],
                   learning_rate=learning_rate, **kw)

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate=1e-3, **kw) -> "AdamState":
        return cls.for_tensors(params.tensors(), learning_rate, **kw)


def adam_update(tensors: list[np.ndarray], grads: list, state: AdamState) -> None:
    """In-place bias-corrected Adam step over parallel tensor/gradient lists.

    ``None`` gradients leave their tensor and moments untouched (frozen).
    """
    if len(tensors) != len(grads) or len(tensors) != len(state.m):
        raise ShapeError("tensor, gradient and moment lists differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate * np.sqrt(1 - b2**t) / (1 - b1**t)
    eps_hat = state.eps * np.sqrt(1 - b2**t)
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (step * m / (np.sqrt(v) + eps_hat)).astype(p.dtype, copy=False)


def flatten_grads(grads) -> list:
    out = []
    for g in grads:
        out += [None, None] if g is None else [g[0], g[1]]
    return out


def adam_step(params: MlpParams, grads, state: AdamState):
    """Adam update of ``params`` from per-layer ``(dW, db)`` gradients; returns both."""
    adam_update(params.tensors(), flatten_grads(grads), state)
    return params, state


def _loss(params, x, labels, loss_fn=loss_cross_entropy):
    logits, cache = forward_mlp(params, x)
    loss, dlogits = loss_fn(logits, labels)
    return loss, dlogits, cache


def _gates(cache):
    return [g.copy() for g in cache.active]


def finite_diff_check(params: MlpParams, x: np.ndarray, labels: np.ndarray, epsilon: float = 1e-4,
                      n_coords: int = 200, rng: np.random.Generator | None = None,
                      floor: float = 1e-8, loss_fn=loss_cross_entropy) -> float:
    """Max relative error between backprop and central differences.

    Checks a random subsample of parameter coordinates in float64. A
    coordinate whose perturbation flips any ReLU gate straddles a kink and is
    skipped. ``loss_fn(logits, labels) -> (loss, dlogits)`` defaults to
    softmax cross-entropy.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    p64 = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    _, dlogits, cache = _loss(p64, x, labels, loss_fn)
    grads, _ = backward_gradients(p64, cache, dlogits)
    analytic = flatten_grads(grads)
    gates = _gates(cache)
    tensors = p64.tensors()

    sizes = np.array([t.size for t in tensors])
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[ti], tensors[ti].shape)
        t = tensors[ti]
        orig = t[idx]
        t[idx] = orig + epsilon
        lp, _, cp = _loss(p64, x, labels, loss_fn)
        t[idx] = orig - epsilon
        lm, _, cm = _loss(p64, x, labels, loss_fn)
        t[idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(gates, _gates(cp))) or \
           any(not np.array_equal(a, b) for a, b in zip(gates, _gates(cm))):
            continue
        numeric = (lp - lm) / (2 * epsilon)
        a = float(analytic[ti][idx])
        rel = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
        worst = max(worst, rel)
    return worst


def save_checkpoint(path, params: MlpParams, state: AdamState | None = None, meta=None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f32 tensors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [("param", t) for t in params.tensors()]
    if state is not None:
        tensors += [("adam_m", t) for t in state.m] + [("adam_v", t) for t in state.v]
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for kind, t in tensors:
            data = np.ascontiguousarray(t, dtype="<f4").tobytes()
            fh.write(data)
            entries.append({"kind": kind, "shape": list(t.shape), "offset": offset})
            offset += len(data)
    manifest = {"layer_dims": params.dims, "tensors": entries, "meta": meta or {}}
    if state is not None:
        manifest["adam"] = {"step_count": state.step_count, "learning_rate": state.learning_rate,
                            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, state_or_None, meta)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    groups: dict[str, list] = {"param": [], "adam_m": [], "adam_v": []}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).astype(np.float32)
        groups[e["kind"]].append(arr.reshape(e["shape"]))
    p = groups["param"]
    params = MlpParams(p[0::2], p[1::2])
    state = None
    if "adam" in manifest:
        a = manifest["adam"]
        state = AdamState(groups["adam_m"], groups["adam_v"], a["step_count"], a["learning_rate"],
                          a["beta1"], a["beta2"], a["eps"])
    return params, state, manifest["meta"]
