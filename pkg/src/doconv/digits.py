"""Deterministic synthetic handwritten-style digit images in IDX form.

A stand-in for MNIST when the real files are unavailable: each image is a
digit drawn with one of OpenCV's Hershey stroke fonts, then randomly
rotated, sheared, scaled, shifted, blurred and noised, and reduced to
28x28 uint8. Requires ``opencv-python-headless`` (the ``digits`` extra).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import load_idx, save_idx

_FONTS = (0, 1, 2, 3, 4, 6, 7)  # Hershey simplex .. script complex, no fancy 5
_ITALIC = 16


def render_digits(count: int, seed: int = 0, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """``count`` images ``[count, size, size]`` (uint8) and balanced labels."""
    import cv2

    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    rng.shuffle(labels)
    big = 6 * size
    images = np.empty((count, size, size), dtype=np.uint8)
    for i, digit in enumerate(labels):
        canvas = np.zeros((big, big), dtype=np.uint8)
        font = int(rng.choice(_FONTS)) | (_ITALIC if rng.random() < 0.3 else 0)
        thickness = int(rng.integers(4, 12))
        cv2.putText(canvas, str(digit), (big // 4, 3 * big // 4), font, 2.5, 255, thickness, cv2.LINE_AA)

        # random rotation and shear about the canvas centre
        m = cv2.getRotationMatrix2D((big / 2, big / 2), rng.uniform(-15, 15), 1.0)
        m[0, 1] += rng.uniform(-0.3, 0.3)
        canvas = cv2.warpAffine(canvas, m, (big, big), flags=cv2.INTER_LINEAR)

        # MNIST-like normalisation: fit the ink box into ~20px, centre by mass
        ys, xs = np.nonzero(canvas)
        crop = canvas[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
        box = rng.uniform(16, 21)
        f = box / max(crop.shape)
        h = max(1, round(crop.shape[0] * f * rng.uniform(0.9, 1.0)))
        w = max(1, round(crop.shape[1] * f * rng.uniform(0.85, 1.0)))
        glyph = cv2.resize(crop, (w, h), interpolation=cv2.INTER_AREA).astype(np.float64)
        total = glyph.sum()
        cy = (glyph.sum(axis=1) @ np.arange(h)) / total
        cx = (glyph.sum(axis=0) @ np.arange(w)) / total
        out = np.zeros((size, size))
        oy = int(np.clip(round(size / 2 - cy + rng.normal(0, 1)), 0, size - h))
        ox = int(np.clip(round(size / 2 - cx + rng.normal(0, 1)), 0, size - w))
        out[oy : oy + h, ox : ox + w] = glyph
        out = cv2.GaussianBlur(out, (0, 0), rng.uniform(0.3, 0.8))
        out = out * (255.0 / max(out.max(), 1.0)) + rng.normal(0, 8, out.shape) * (rng.random() < 0.3)
        images[i] = np.clip(out, 0, 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_digit_idx(directory, n_train: int = 10000, n_test: int = 2000, seed: int = 0) -> dict:
    """Write train/test IDX pairs into ``directory`` (skipped if already there).

    Returns the four paths keyed ``train_images``, ``train_labels``,
    ``test_images``, ``test_labels``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": d / f"synth-train-{n_train}-{seed}-images-idx3-ubyte",
        "train_labels": d / f"synth-train-{n_train}-{seed}-labels-idx1-ubyte",
        "test_images": d / f"synth-test-{n_test}-{seed}-images-idx3-ubyte",
        "test_labels": d / f"synth-test-{n_test}-{seed}-labels-idx1-ubyte",
    }
    if not all(p.exists() for p in paths.values()):
        x, y = render_digits(n_train + n_test, seed)
        save_idx(x[:n_train], y[:n_train], paths["train_images"], paths["train_labels"])
        save_idx(x[n_train:], y[n_train:], paths["test_images"], paths["test_labels"])
    return {k: str(v) for k, v in paths.items()}


def load_digit_split(directory, n_train: int = 10000, n_test: int = 2000, seed: int = 0):
    p = write_digit_idx(directory, n_train, n_test, seed)
    return load_idx(p["train_images"], p["train_labels"]), load_idx(p["test_images"], p["test_labels"])
