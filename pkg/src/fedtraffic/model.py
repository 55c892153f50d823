"""Per-client GRU encoder-decoder forecaster.

Everything here is plain numpy in 64-bit by default: forward pass, exact
reverse-mode gradients through the autoregressive decoder, masked MSE, and
Adam. Keeping the arithmetic explicit makes the training loop reproducible
bit-for-bit and lets the test suite check gradients against central finite
differences.

Gate convention (update z, reset r, candidate c):

    z = sigmoid(Wz x + Uz h + bz)
    r = sigmoid(Wr x + Ur h + br)
    c = tanh(Wc x + Uc (r*h) + bc)
    h' = (1 - z)*h + z*c

Storage packs the three gates of each layer into single matrices with
column blocks ordered [z | r | c]:

    "<side><layer>.wx"  (in_dim, 3H)   input-to-hidden
    "<side><layer>.wh"  (H, 3H)        hidden-to-hidden
    "<side><layer>.b"   (3H,)          bias
    "proj.w" (H, D), "proj.b" (D,)     output projection

sides are "enc" then "dec", layers 0..num_layers-1. The canonical
serialization order of the logical per-gate tensors lives in
``aggregation.layout_for_arch``.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from .errors import CheckpointError, ConfigError, ShapeError, TrainingDiverged

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GruArch:
    """Architecture descriptor; defaults follow the benchmark configuration."""

    input_dim: int = 1
    hidden_dim: int = 100
    num_layers: int = 2
    horizon_in: int = 12
    horizon_out: int = 12

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers", "horizon_in", "horizon_out"):
            if getattr(self, name) < 1:
                raise ConfigError(f"arch.{name} must be >= 1, got {getattr(self, name)}")

    def layer_names(self) -> list[str]:
        return [f"{side}{l}" for side in ("enc", "dec") for l in range(self.num_layers)]

    def layer_input_dim(self, layer_name: str) -> int:
        return self.input_dim if layer_name.endswith("0") else self.hidden_dim


def param_shapes(arch: GruArch) -> dict[str, tuple[int, ...]]:
    """Stored tensor names and shapes, in canonical order."""
    h, d = arch.hidden_dim, arch.input_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for name in arch.layer_names():
        din = arch.layer_input_dim(name)
        shapes[f"{name}.wx"] = (din, 3 * h)
        shapes[f"{name}.wh"] = (h, 3 * h)
        shapes[f"{name}.b"] = (3 * h,)
    shapes["proj.w"] = (h, d)
    shapes["proj.b"] = (d,)
    return shapes


@dataclass
class GruSeq2Seq:
    """Model parameters plus the architecture that shapes them."""

    arch: GruArch
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["proj.w"].dtype

    def copy(self) -> "GruSeq2Seq":
        return GruSeq2Seq(self.arch, {k: v.copy() for k, v in self.params.items()})


def params_equal(a: GruSeq2Seq, b: GruSeq2Seq) -> bool:
    """Bitwise equality of two parameter sets."""
    if a.arch != b.arch or a.params.keys() != b.params.keys():
        return False
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def init_params(arch: GruArch, seed: int, dtype=np.float64) -> GruSeq2Seq:
    """Deterministic initialization from a PCG64 stream.

    Weights are uniform in [-1/sqrt(hidden_dim), +1/sqrt(hidden_dim)], drawn
    gate by gate in the canonical order (z, r, c; input-to-hidden before
    hidden-to-hidden); biases start at zero.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(arch.hidden_dim)
    h = arch.hidden_dim
    params: dict[str, np.ndarray] = {}
    for name in arch.layer_names():
        din = arch.layer_input_dim(name)
        wx_gates = [rng.uniform(-bound, bound, size=(din, h)) for _ in range(3)]
        wh_gates = [rng.uniform(-bound, bound, size=(h, h)) for _ in range(3)]
        params[f"{name}.wx"] = np.hstack(wx_gates).astype(dtype)
        params[f"{name}.wh"] = np.hstack(wh_gates).astype(dtype)
        params[f"{name}.b"] = np.zeros(3 * h, dtype=dtype)
    params["proj.w"] = rng.uniform(-bound, bound, size=(h, arch.input_dim)).astype(dtype)
    params["proj.b"] = np.zeros(arch.input_dim, dtype=dtype)
    return GruSeq2Seq(arch=arch, params=params)


_sigmoid = expit  # numerically stable for arbitrarily large activations


def _cell_fwd(x, h, wx, wh, b, hid):
    """One GRU step for a batch; returns (h_new, cache)."""
    gx = x @ wx + b
    a_zr = gx[:, : 2 * hid] + h @ wh[:, : 2 * hid]
    zr = _sigmoid(a_zr)
    z = zr[:, :hid]
    r = zr[:, hid:]
    rh = r * h
    c = np.tanh(gx[:, 2 * hid :] + rh @ wh[:, 2 * hid :])
    h_new = (1.0 - z) * h + z * c
    return h_new, (x, h, z, r, c, rh)


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Public single-step GRU; accepts vectors or (batch, dim) arrays."""
    squeeze = x_t.ndim == 1
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    hid = wh.shape[0]
    h_new, _ = _cell_fwd(x, h, wx, wh, b, hid)
    return h_new[0] if squeeze else h_new


@dataclass
class Tape:
    """Computation record tying a forward pass to its exact parameters."""

    params: dict[str, np.ndarray]
    arch: GruArch
    batch: int
    enc_caches: list  # [step][layer] -> cell cache
    dec_caches: list
    dec_tops: list  # decoder top-layer hidden per output step


def forward_batch(model: GruSeq2Seq, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Batched forward pass.

    x has shape (B, horizon_in, D). The encoder starts from zero hidden
    states; the decoder starts from the encoder's final hidden states,
    consumes the last input frame first, then feeds back its own previous
    prediction. Returns (B, horizon_out, D) predictions and the tape.
    """
    arch = model.arch
    p = model.params
    hid = arch.hidden_dim
    b_sz, m, d = x.shape
    if m != arch.horizon_in or d != arch.input_dim:
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match (horizon_in={arch.horizon_in}, "
            f"input_dim={arch.input_dim})"
        )
    layers = arch.num_layers
    enc_names = [f"enc{l}" for l in range(layers)]
    dec_names = [f"dec{l}" for l in range(layers)]

    h_enc = [np.zeros((b_sz, hid), dtype=model.dtype) for _ in range(layers)]
    enc_caches = []
    for t in range(m):
        inp = x[:, t, :]
        step_caches = []
        for l, name in enumerate(enc_names):
            h_new, cache = _cell_fwd(inp, h_enc[l], p[f"{name}.wx"], p[f"{name}.wh"], p[f"{name}.b"], hid)
            step_caches.append(cache)
            h_enc[l] = h_new
            inp = h_new
        enc_caches.append(step_caches)

    h_dec = list(h_enc)
    y_prev = x[:, -1, :]
    y_out = np.empty((b_sz, arch.horizon_out, d), dtype=model.dtype)
    dec_caches = []
    dec_tops = []
    for k in range(arch.horizon_out):
        inp = y_prev
        step_caches = []
        for l, name in enumerate(dec_names):
            h_new, cache = _cell_fwd(inp, h_dec[l], p[f"{name}.wx"], p[f"{name}.wh"], p[f"{name}.b"], hid)
            step_caches.append(cache)
            h_dec[l] = h_new
            inp = h_new
        dec_caches.append(step_caches)
        dec_tops.append(h_dec[-1])
        y_prev = h_dec[-1] @ p["proj.w"] + p["proj.b"]
        y_out[:, k, :] = y_prev

    tape = Tape(params=p, arch=arch, batch=b_sz,
                enc_caches=enc_caches, dec_caches=dec_caches, dec_tops=dec_tops)
    return y_out, tape


def forward(model: GruSeq2Seq, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Single-sequence forward pass; x is (horizon_in, D)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d (steps, features) input, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ShapeError("input contains non-finite values; impute before forecasting")
    y, tape = forward_batch(model, x[None, :, :])
    return y[0], tape


def backward(tape: Tape, d_y: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients given upstream d loss / d predictions.

    d_y has shape (B, horizon_out, D). Gradients flow through the output
    projection, the decoder recurrence, the autoregressive feedback path,
    and into the encoder via the hidden-state handoff.
    """
    arch = tape.arch
    p = tape.params
    hid = arch.hidden_dim
    layers = arch.num_layers
    d_y = np.asarray(d_y)
    if d_y.shape != (tape.batch, arch.horizon_out, arch.input_dim):
        raise ShapeError(
            f"upstream gradient shape {d_y.shape} does not match "
            f"({tape.batch}, {arch.horizon_out}, {arch.input_dim})"
        )

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    enc_names = [f"enc{l}" for l in range(layers)]
    dec_names = [f"dec{l}" for l in range(layers)]
    proj_w = p["proj.w"]

    dh_next = [np.zeros((tape.batch, hid), dtype=proj_w.dtype) for _ in range(layers)]
    dy_carry = np.zeros((tape.batch, arch.input_dim), dtype=proj_w.dtype)
    for k in reversed(range(arch.horizon_out)):
        dy_k = d_y[:, k, :] + dy_carry
        h_top = tape.dec_tops[k]
        grads["proj.w"] += h_top.T @ dy_k
        grads["proj.b"] += dy_k.sum(axis=0)
        d_inp = dy_k @ proj_w.T  # gradient into the top layer's hidden state
        for l in reversed(range(layers)):
            name = dec_names[l]
            dh_total = dh_next[l] + d_inp
            d_inp, dh_next[l] = _layer_bwd(
                tape.dec_caches[k][l], p[f"{name}.wx"], p[f"{name}.wh"], dh_total,
                hid, grads[f"{name}.wx"], grads[f"{name}.wh"], grads[f"{name}.b"],
            )
        dy_carry = d_inp if k > 0 else dy_carry * 0.0
        # at k == 0 the decoder input was the last encoder frame (data, not a
        # prediction), so its gradient stops here

    for t in reversed(range(arch.horizon_in)):
        d_inp = None
        for l in reversed(range(layers)):
            name = enc_names[l]
            dh_total = dh_next[l] if d_inp is None else dh_next[l] + d_inp
            d_inp, dh_next[l] = _layer_bwd(
                tape.enc_caches[t][l], p[f"{name}.wx"], p[f"{name}.wh"], dh_total,
                hid, grads[f"{name}.wx"], grads[f"{name}.wh"], grads[f"{name}.b"],
            )
    return grads


def _layer_bwd(cache, wx, wh, dh_new, hid, dwx, dwh, db):
    """Backward through one cached GRU step. Returns (dx, dh_prev)."""
    x, h, z, r, c, rh = cache
    dz = dh_new * (c - h)
    dc = dh_new * z
    dh = dh_new * (1.0 - z)

    da_c = dc * (1.0 - c * c)
    drh = da_c @ wh[:, 2 * hid :].T
    dh += drh * r
    dr = drh * h

    da_z = dz * (z * (1.0 - z))
    da_r = dr * (r * (1.0 - r))
    da = np.hstack((da_z, da_r, da_c))

    dwx += x.T @ da
    db += da.sum(axis=0)
    dwh[:, : 2 * hid] += h.T @ da[:, : 2 * hid]
    dwh[:, 2 * hid :] += rh.T @ da_c

    dx = da @ wx.T
    dh += da[:, : 2 * hid] @ wh[:, : 2 * hid].T
    return dx, dh


def mse_loss(y_hat: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[float, int]:
    """Masked mean squared error over one sequence.

    Returns (loss, n_observed); n_observed == 0 flags an all-masked target,
    in which case the loss is 0 by convention.
    """
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    mask = np.asarray(mask, dtype=bool)
    if y_hat.shape != y.shape or y.shape != mask.shape:
        raise ShapeError(f"shape mismatch: {y_hat.shape} vs {y.shape} vs {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    diff = np.where(mask, y_hat - y, 0.0)
    return float((diff * diff).sum() / n), n


def masked_mse_batch(y_hat: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch loss = mean over examples of per-example masked MSE.

    Returns (loss, d loss / d y_hat). Examples whose target mask is all
    false contribute zero loss and zero gradient.
    """
    b = y_hat.shape[0]
    diff = np.where(mask, y_hat - y, 0.0)
    n = mask.sum(axis=(1, 2))
    safe_n = np.maximum(n, 1)
    per_example = (diff * diff).sum(axis=(1, 2)) / safe_n
    loss = float(per_example.sum() / b)
    d_y = diff * (2.0 / (b * safe_n))[:, None, None]
    return loss, d_y


@dataclass
class AdamState:
    """Adam moments shaped like the model parameters."""

    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, model: GruSeq2Seq, lr: float = 1e-3) -> "AdamState":
        return cls(
            t=0,
            m={k: np.zeros_like(v) for k, v in model.params.items()},
            v={k: np.zeros_like(v) for k, v in model.params.items()},
            lr=lr,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            t=self.t,
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )


def _adam_inplace(params: dict, grads: dict, state: AdamState) -> None:
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in {key!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[key] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(model: GruSeq2Seq, grads: dict[str, np.ndarray], state: AdamState) -> tuple[GruSeq2Seq, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if grads.keys() != model.params.keys():
        raise ShapeError("gradient keys do not match model parameters")
    new_model = model.copy()
    new_state = state.copy()
    _adam_inplace(new_model.params, grads, new_state)
    return new_model, new_state


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def train_epochs(
    model: GruSeq2Seq,
    state: AdamState,
    split,
    epochs: int,
    batch_size: int,
    seed,
    grad_clip: float | None = None,
) -> tuple[GruSeq2Seq, AdamState, list[float]]:
    """Minibatch training over a windowed split.

    ``split`` needs .inputs (S, m, D), .targets (S, T, D) and .target_mask
    arrays. Sequence order is reshuffled every epoch from the given seed
    (an int or an already-seeded numpy Generator, whose state advances).
    The last partial batch is kept. Returns fresh model/state plus the mean
    train loss per epoch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model = model.copy()
    state = state.copy()
    n_seq = split.inputs.shape[0]
    if n_seq == 0:
        raise ConfigError("training split is empty")

    losses: list[float] = []
    # single-threaded BLAS keeps the arithmetic identical no matter how
    # clients are spread over workers (and these matrices are too small for
    # BLAS threading to pay off anyway); overflow is detected by the finite
    # guard in the Adam step, not by numpy warnings
    with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(n_seq)
            total = 0.0
            for start in range(0, n_seq, batch_size):
                idx = order[start : start + batch_size]
                xb = split.inputs[idx]
                yb = split.targets[idx]
                mb = split.target_mask[idx]
                y_hat, tape = forward_batch(model, xb)
                loss, d_y = masked_mse_batch(y_hat, yb, mb)
                grads = backward(tape, d_y)
                if grad_clip is not None:
                    _clip_grads(grads, grad_clip)
                _adam_inplace(model.params, grads, state)
                total += loss * len(idx)
            losses.append(total / n_seq)
    return model, state, losses


def predict(model: GruSeq2Seq, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Forward-only predictions for (S, m, D) inputs, in evaluation batches."""
    out = np.empty((inputs.shape[0], model.arch.horizon_out, model.arch.input_dim), dtype=model.dtype)
    for start in range(0, inputs.shape[0], batch_size):
        y, _ = forward_batch(model, inputs[start : start + batch_size])
        out[start : start + len(y)] = y
    return out


def save_checkpoint(path, model: GruSeq2Seq, state: AdamState) -> None:
    """Write a versioned npz checkpoint; load_checkpoint round-trips bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": {
            "input_dim": model.arch.input_dim,
            "hidden_dim": model.arch.hidden_dim,
            "num_layers": model.arch.num_layers,
            "horizon_in": model.arch.horizon_in,
            "horizon_out": model.arch.horizon_out,
        },
        "adam": {"t": state.t, "lr": state.lr, "beta1": state.beta1,
                 "beta2": state.beta2, "eps": state.eps},
    }
    arrays = {f"p/{k}": v for k, v in model.params.items()}
    arrays.update({f"m/{k}": v for k, v in state.m.items()})
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[GruSeq2Seq, AdamState]:
    """Load a checkpoint written by save_checkpoint."""
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
            arch = GruArch(**meta["arch"])
            expected = param_shapes(arch)
            params: dict[str, np.ndarray] = {}
            m: dict[str, np.ndarray] = {}
            v: dict[str, np.ndarray] = {}
            for key, shape in expected.items():
                for prefix, dest in (("p", params), ("m", m), ("v", v)):
                    full = f"{prefix}/{key}"
                    if full not in data:
                        raise CheckpointError(f"checkpoint missing array {full!r}")
                    arr = data[full]
                    if arr.shape != shape:
                        raise CheckpointError(
                            f"checkpoint array {full!r} has shape {arr.shape}, expected {shape}"
                        )
                    dest[key] = arr
    except (OSError, ValueError, KeyError, json.JSONDecodeError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    adam_meta = meta["adam"]
    state = AdamState(t=int(adam_meta["t"]), m=m, v=v, lr=adam_meta["lr"],
                      beta1=adam_meta["beta1"], beta2=adam_meta["beta2"], eps=adam_meta["eps"])
    return GruSeq2Seq(arch=arch, params=params), state
