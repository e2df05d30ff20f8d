"""FGSM perturbations, adversarial test sets over an epsilon schedule, PSNR.

The perturbation direction is computed once per sample on a surrogate model
(sign of the true-label cross-entropy gradient); each epsilon then yields one
clipped adversarial set. Persisting the sets lets every victim model be
evaluated on identical images, which is what makes the black-box transfer
comparison meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, pixmap
from .errors import DataFormatError, ShapeError
from .nets import Network

WHITE_BOX = "white"
BLACK_BOX = "black"


@dataclass
class PerturbationSet:
    """Per-sample FGSM sign tensors computed on one surrogate model."""
    surrogate: str
    signs: np.ndarray         # N x input shape, values in {-1, 0, +1}
    sample_ids: np.ndarray


@dataclass
class AdversarialSet:
    """One perturbed copy of the test set at a single attack strength."""
    epsilon: float
    images: np.ndarray        # N x input shape, clipped to [0, 1]
    labels: np.ndarray
    sample_ids: np.ndarray
    surrogate: str
    mode: str                 # white | black

    def __len__(self) -> int:
        return len(self.images)


def input_gradient(net: Network, x: np.ndarray, true_class: int) -> np.ndarray:
    """Exact gradient of the cross-entropy loss at (x, true_class) w.r.t. x."""
    logits, tape = net.forward_tape(x)
    _, probs = engine.softmax_xent(logits, true_class)
    seed = engine.softmax_xent_backward(probs, true_class)
    return engine.backward(tape, seed).input_grad


def fgsm_sign(grad: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(grad)


def apply_attack(x: np.ndarray, sign: np.ndarray, eps: float) -> np.ndarray:
    """clip(x + eps * sign, 0, 1)."""
    if x.shape != sign.shape:
        raise ShapeError(f"image shape {x.shape} != sign shape {sign.shape}")
    if eps < 0:
        raise ValueError(f"epsilon must be non-negative, got {eps}")
    return np.clip(x + eps * sign, 0.0, 1.0)


def check_eps_schedule(eps_list) -> list[float]:
    eps = [float(e) for e in eps_list]
    if not eps:
        raise ValueError("epsilon schedule is empty")
    if any(e < 0 for e in eps):
        raise ValueError(f"epsilon schedule has negative entries: {eps}")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ValueError(f"epsilon schedule must be strictly increasing: {eps}")
    return eps


def compute_perturbations(surrogate: Network, test_set) -> PerturbationSet:
    """FGSM sign tensors for every test sample, using the true label."""
    signs = np.stack([
        fgsm_sign(input_gradient(surrogate, test_set.images[i],
                                 int(test_set.labels[i])))
        for i in range(len(test_set))
    ])
    return PerturbationSet(surrogate.spec.name, signs, test_set.ids.copy())


def generate_adversarial_sets(surrogate: Network, test_set, eps_list,
                              mode: str = WHITE_BOX) -> list[AdversarialSet]:
    """One AdversarialSet per epsilon, all from a single perturbation pass."""
    eps = check_eps_schedule(eps_list)
    if mode not in (WHITE_BOX, BLACK_BOX):
        raise ValueError(f"mode must be 'white' or 'black', got {mode!r}")
    pert = compute_perturbations(surrogate, test_set)
    sets = []
    for e in eps:
        images = np.stack([apply_attack(test_set.images[i], pert.signs[i], e)
                           for i in range(len(test_set))])
        sets.append(AdversarialSet(e, images, test_set.labels.copy(),
                                   pert.sample_ids.copy(), pert.surrogate, mode))
    return sets


def psnr(clean: np.ndarray, adv: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against MAX = 1.0; +inf when identical."""
    if clean.shape != adv.shape:
        raise ShapeError(f"psnr shape mismatch: {clean.shape} vs {adv.shape}")
    mse = float(np.mean((clean - adv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --------------------------------------------------------------------------
# On-disk adversarial sets: manifest + one pixmap per sample
# --------------------------------------------------------------------------
#
# <dir>/manifest.txt        key = value header (surrogate, mode, epsilon,
#                           count), blank line, then one line per sample:
#                           "<filename> <sample id> <label>"
# <dir>/sample_NNNN.pgm     grayscale image (single-channel inputs)
# <dir>/sample_NNNN.ppm     color image (three-channel inputs)

def save_adversarial_set(adv: AdversarialSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"surrogate = {adv.surrogate}",
        f"mode = {adv.mode}",
        f"epsilon = {adv.epsilon:.6f}",
        f"count = {len(adv)}",
        "",
    ]
    for i in range(len(adv)):
        img = adv.images[i]
        if img.shape[0] == 1:
            name = f"sample_{i:04d}.pgm"
            pixmap.write_pgm(directory / name, img[0])
        elif img.shape[0] == 3:
            name = f"sample_{i:04d}.ppm"
            pixmap.write_ppm(directory / name, img.transpose(1, 2, 0))
        else:
            raise ValueError(f"cannot persist {img.shape[0]}-channel images "
                             f"as pixmaps")
        lines.append(f"{name} {int(adv.sample_ids[i])} {int(adv.labels[i])}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n",
                                            encoding="ascii")


def load_adversarial_set(directory) -> AdversarialSet:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise DataFormatError(f"{directory}: missing manifest.txt")
    header: dict[str, str] = {}
    samples: list[tuple[str, int, int]] = []
    in_header = True
    for ln, raw in enumerate(manifest.read_text(encoding="ascii").splitlines(), 1):
        line = raw.strip()
        if in_header:
            if not line:
                in_header = False
                continue
            if "=" not in line:
                raise DataFormatError(f"{manifest}:{ln}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
        elif line:
            parts = line.split()
            if len(parts) != 3:
                raise DataFormatError(f"{manifest}:{ln}: expected "
                                      f"'<file> <id> <label>'")
            samples.append((parts[0], int(parts[1]), int(parts[2])))
    for key in ("surrogate", "mode", "epsilon", "count"):
        if key not in header:
            raise DataFormatError(f"{manifest}: missing header key {key!r}")
    if int(header["count"]) != len(samples):
        raise DataFormatError(f"{manifest}: header count {header['count']} != "
                              f"{len(samples)} sample lines")
    images, ids, labels = [], [], []
    for name, sid, label in samples:
        path = directory / name
        if name.endswith(".pgm"):
            images.append(pixmap.read_pgm(path)[None, :, :])
        else:
            images.append(pixmap.read_ppm(path).transpose(2, 0, 1))
        ids.append(sid)
        labels.append(label)
    return AdversarialSet(float(header["epsilon"]), np.stack(images),
                          np.array(labels, dtype=np.int64),
                          np.array(ids, dtype=np.int64),
                          header["surrogate"], header["mode"])
