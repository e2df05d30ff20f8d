"""Dense-tensor layer kernels with tape-based reverse-mode differentiation.

All arrays are float64, row-major. A forward pass over a sequential layer
chain records one ``TapeEntry`` per layer; ``backward`` consumes the entries
in reverse and returns exact gradients with respect to the network input,
every parameter, and every intermediate activation. The layer vocabulary is
exactly what the toy CNNs need: conv2d, relu, 2x2 maxpool, flatten, dense,
and softmax cross-entropy on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .rng import Xoshiro256StarStar


# ---------------------------------------------------------------------------
# Layer kernels (forward)
# ---------------------------------------------------------------------------

def _conv_windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of all kernel-sized windows: (C, H', W', kh, kw)."""
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of a CxHxW input with OxCxKhxKw kernels.

    Zero padding; output side lengths floor((side + 2*padding - k)/stride) + 1.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and OxCxKhxKw weights, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]} "
                         f"channels, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, "
                         f"got {stride}, {padding}")
    _, h, wd = x.shape
    _, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{wd + 2 * padding}")
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(padded, kh, kw, stride)
    return np.einsum("cijuv,ocuv->oij", win, w) + b[:, None, None]


def relu_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise max(value, 0)."""
    return np.maximum(x, 0.0)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool of a CxHxW input; ragged edges pool the leftover strip.

    Returns (pooled Cx ceil(H/2) x ceil(W/2), argmax), where argmax holds each
    window's winning position as 2*u + v in row-major window order (ties go to
    the first occurrence, which is what `argmax` over the flattened window gives).
    """
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 expects CxHxW input, got {x.shape}")
    c, h, w = x.shape
    hp, wp = h + (h % 2), w + (w % 2)
    padded = np.full((c, hp, wp), -np.inf)
    padded[:, :h, :w] = x
    blocks = (padded.reshape(c, hp // 2, 2, wp // 2, 2)
              .transpose(0, 1, 3, 2, 4)
              .reshape(c, hp // 2, wp // 2, 4))
    argmax = blocks.argmax(axis=3)
    pooled = np.take_along_axis(blocks, argmax[..., None], axis=3)[..., 0]
    return pooled, argmax


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map: out[m] = b[m] + sum_n w[m, n] * x[n]."""
    if x.ndim != 1 or w.ndim != 2:
        raise ShapeError(f"dense expects 1-D input and 2-D weights, "
                         f"got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"dense length mismatch: input has {x.shape[0]} "
                         f"values, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[0]},)")
    return w @ x + b


def softmax_xent(logits: np.ndarray, true_class: int) -> tuple[float, np.ndarray]:
    """Stable softmax (max-subtraction) plus natural-log cross-entropy loss."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_xent expects a 1-D logit vector, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= true_class < k:
        raise ValueError(f"true_class {true_class} out of range for {k} classes")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    probs = exp / total
    loss = float(np.log(total) - shifted[true_class])
    return loss, probs


def softmax_xent_backward(probs: np.ndarray, true_class: int,
                          seed: float = 1.0) -> np.ndarray:
    """Gradient of seed * cross-entropy with respect to the logits: probs - onehot."""
    grad = probs.copy()
    grad[true_class] -= 1.0
    return grad * seed


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    """One recorded layer application: what ran, on what, producing what."""
    kind: str              # conv | relu | maxpool | flatten | dense
    layer_index: int
    saved: dict            # state the backward kernel needs
    output: np.ndarray


@dataclass
class Tape:
    """Execution record of one forward pass, consumed in reverse by backward."""
    x: np.ndarray
    entries: list[TapeEntry] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        if not self.entries:
            raise ValueError("empty tape has no output")
        return self.entries[-1].output


def tape_conv(tape: Tape, layer_index: int, w: np.ndarray, b: np.ndarray,
              stride: int, padding: int) -> np.ndarray:
    x = tape.entries[-1].output if tape.entries else tape.x
    out = conv2d_forward(x, w, b, stride, padding)
    tape.entries.append(TapeEntry(
        "conv", layer_index,
        {"x": x, "w": w, "stride": stride, "padding": padding}, out))
    return out


def tape_relu(tape: Tape, layer_index: int) -> np.ndarray:
    x = tape.entries[-1].output if tape.entries else tape.x
    out = relu_forward(x)
    tape.entries.append(TapeEntry("relu", layer_index, {"mask": x > 0.0}, out))
    return out


def tape_maxpool(tape: Tape, layer_index: int) -> np.ndarray:
    x = tape.entries[-1].output if tape.entries else tape.x
    out, argmax = maxpool2_forward(x)
    tape.entries.append(TapeEntry(
        "maxpool", layer_index, {"argmax": argmax, "in_shape": x.shape}, out))
    return out


def tape_flatten(tape: Tape, layer_index: int) -> np.ndarray:
    x = tape.entries[-1].output if tape.entries else tape.x
    out = x.reshape(-1)
    tape.entries.append(TapeEntry("flatten", layer_index, {"in_shape": x.shape}, out))
    return out


def tape_dense(tape: Tape, layer_index: int, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = tape.entries[-1].output if tape.entries else tape.x
    out = dense_forward(x, w, b)
    tape.entries.append(TapeEntry("dense", layer_index, {"x": x, "w": w}, out))
    return out


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

@dataclass
class GradientBundle:
    """Gradients of a scalar objective, shaped exactly like their primals."""
    input_grad: np.ndarray
    param_grads: dict[int, tuple[np.ndarray, np.ndarray]]  # layer index -> (dW, db)
    activation_grads: dict[int, np.ndarray]                # layer index -> d(output)


def _conv_backward(entry: TapeEntry, gy: np.ndarray):
    x, w = entry.saved["x"], entry.saved["w"]
    stride, padding = entry.saved["stride"], entry.saved["padding"]
    _, _, kh, kw = w.shape
    _, h_out, w_out = gy.shape
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(padded, kh, kw, stride)
    gw = np.einsum("oij,cijuv->ocuv", gy, win)
    gb = gy.sum(axis=(1, 2))
    # scatter-add through the (possibly overlapping) windows
    contrib = np.einsum("oij,ocuv->cijuv", gy, w)
    gpad = np.zeros_like(padded)
    for u in range(kh):
        for v in range(kw):
            gpad[:, u:u + stride * h_out:stride,
                 v:v + stride * w_out:stride] += contrib[:, :, :, u, v]
    c, h, wd = x.shape
    gx = gpad[:, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gx), gw, gb


def _maxpool_backward(entry: TapeEntry, gy: np.ndarray) -> np.ndarray:
    argmax = entry.saved["argmax"]
    c, h, w = entry.saved["in_shape"]
    _, hb, wb = gy.shape
    gx = np.zeros((c, h, w))
    rows = 2 * np.arange(hb)[None, :, None] + argmax // 2
    cols = 2 * np.arange(wb)[None, None, :] + argmax % 2
    gx[np.arange(c)[:, None, None], rows, cols] = gy
    return gx


def backward(tape: Tape, out_grad: np.ndarray) -> GradientBundle:
    """Reverse-mode sweep from a gradient seed on the chain's final output.

    For a cross-entropy objective, seed with
    ``softmax_xent_backward(probs, true_class, seed)``; for a single-logit
    objective (class score y^c), seed with a one-hot vector.
    """
    if not isinstance(tape, Tape) or not tape.entries:
        raise ValueError("backward requires a completed forward tape")
    if out_grad.shape != tape.logits.shape:
        raise ShapeError(f"gradient seed shape {out_grad.shape} != "
                         f"output shape {tape.logits.shape}")
    param_grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    activation_grads: dict[int, np.ndarray] = {}
    g = out_grad
    for entry in reversed(tape.entries):
        activation_grads[entry.layer_index] = g
        if entry.kind == "conv":
            g, gw, gb = _conv_backward(entry, g)
            param_grads[entry.layer_index] = (gw, gb)
        elif entry.kind == "relu":
            g = g * entry.saved["mask"]
        elif entry.kind == "maxpool":
            g = _maxpool_backward(entry, g)
        elif entry.kind == "flatten":
            g = g.reshape(entry.saved["in_shape"])
        elif entry.kind == "dense":
            x, w = entry.saved["x"], entry.saved["w"]
            param_grads[entry.layer_index] = (np.outer(g, x), g.copy())
            g = w.T @ g
        else:
            raise ValueError(f"unknown tape entry kind {entry.kind!r}")
    return GradientBundle(g, param_grads, activation_grads)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def _tape_signature(tape: Tape):
    """ReLU masks and pool argmaxes; differing signatures mean the finite
    difference straddled a nondifferentiable point."""
    sig = []
    for entry in tape.entries:
        if entry.kind == "relu":
            sig.append(entry.saved["mask"])
        elif entry.kind == "maxpool":
            sig.append(entry.saved["argmax"])
    return sig


def _same_signature(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(net, x: np.ndarray, true_class: int, h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Sweeps the input and every parameter coordinate (or a seeded sample of
    ``max_coords`` of them), returning
    max |analytic - fd| / max(1e-12, |fd|). Coordinates whose +/-h evaluation
    flips a ReLU mask or pool argmax are excluded: the loss is not
    differentiable there and the central difference is meaningless.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    logits, tape = net.forward_tape(x)
    loss, probs = softmax_xent(logits, true_class)
    bundle = backward(tape, softmax_xent_backward(probs, true_class))
    base_sig = _tape_signature(tape)

    # coordinate space: ("x", flat_i) then ("w"/"b", layer, flat_i)
    coords: list[tuple] = [("x", i) for i in range(x.size)]
    for li, (w, b) in net.iter_params():
        coords += [("w", li, i) for i in range(w.size)]
        coords += [("b", li, i) for i in range(b.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = Xoshiro256StarStar(seed)
        picked = set()
        while len(picked) < max_coords:
            picked.add(rng.below(len(coords)))
        coords = [coords[i] for i in sorted(picked)]

    def loss_at(xv: np.ndarray) -> tuple[float, list]:
        lg, tp = net.forward_tape(xv)
        ls, _ = softmax_xent(lg, true_class)
        return ls, _tape_signature(tp)

    params = {li: (w, b) for li, (w, b) in net.iter_params()}
    worst = 0.0
    x_work = x.copy()
    for coord in coords:
        if coord[0] == "x":
            flat, idx = x_work.reshape(-1), coord[1]
            analytic = bundle.input_grad.reshape(-1)[idx]
        else:
            kind, li, idx = coord
            arr = params[li][0 if kind == "w" else 1]
            flat = arr.reshape(-1)
            gw, gb = bundle.param_grads[li]
            analytic = (gw if kind == "w" else gb).reshape(-1)[idx]
        orig = flat[idx]
        flat[idx] = orig + h
        lp, sig_p = loss_at(x_work)
        flat[idx] = orig - h
        lm, sig_m = loss_at(x_work)
        flat[idx] = orig
        if not (_same_signature(base_sig, sig_p) and _same_signature(base_sig, sig_m)):
            continue
        fd = (lp - lm) / (2.0 * h)
        rel = abs(analytic - fd) / max(1e-12, abs(fd))
        worst = max(worst, rel)
    return worst
