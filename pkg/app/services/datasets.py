"""
Synthetic image classification tasks for desk-scale training.

- blobs: Gaussian clusters whose class is encoded in per-channel mean levels.
  Linearly separable from pooled pixels.
- textures: oriented stripe/checker patterns with random sign and amplitude on
  top of a class-independent background. Every pattern has zero mean over each
  pooling cell, so the pooled image alone carries no class information and a
  classifier has to use the backbone's texture features.
"""
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_blobs
from sklearn.model_selection import train_test_split
from sklearn.utils import check_random_state

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int
    name: str = ""

    @property
    def image_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])


def _split(x: np.ndarray, y: np.ndarray, num_classes: int, val_fraction: float,
           seed: int, name: str) -> Dataset:
    x_train, x_val, y_train, y_val = train_test_split(
        x, y, test_size=val_fraction, stratify=y, random_state=seed,
    )
    logger.info("Built %s dataset: %d train / %d val, %d classes",
                name, len(y_train), len(y_val), num_classes)
    return Dataset(x_train, y_train.astype(np.int64), x_val, y_val.astype(np.int64),
                   num_classes, name)


def make_blob_images(n_samples: int = 256, num_classes: int = 2, channels: int = 1,
                     image_size: int = 8, separation: float = 1.0, noise: float = 0.5,
                     val_fraction: float = 0.25, seed: int = 0) -> Dataset:
    if num_classes > 2 * channels:
        raise ValueError(
            f"blob images encode at most {2 * channels} classes with {channels} channels"
        )
    centers = np.zeros((num_classes, channels))
    for k in range(num_classes):
        centers[k, k // 2] = separation if k % 2 == 0 else -separation
    pixels = image_size * image_size
    x, y = make_blobs(
        n_samples=n_samples,
        n_features=channels * pixels,
        centers=np.repeat(centers, pixels, axis=1),
        cluster_std=noise,
        random_state=seed,
    )
    x = x.reshape(n_samples, channels, image_size, image_size)
    return _split(x, y, num_classes, val_fraction, seed, "blobs")


def _period4(a: np.ndarray) -> np.ndarray:
    return np.where((a // 2) % 2 == 0, 1.0, -1.0)


def texture_patterns(image_size: int) -> dict:
    i, j = np.indices((image_size, image_size))
    return {
        "rows2": (-1.0) ** i,
        "cols2": (-1.0) ** j,
        "checker2": (-1.0) ** (i + j),
        "rows4": _period4(i),
        "cols4": _period4(j),
        "checker4": _period4(i) * _period4(j),
    }


def _pool_invisible(pattern: np.ndarray, pool_factor: int) -> bool:
    size = pattern.shape[0]
    if size % pool_factor:
        return False
    cells = pattern.reshape(size // pool_factor, pool_factor, size // pool_factor, pool_factor)
    return bool(np.allclose(cells.mean(axis=(1, 3)), 0.0))


def make_texture_images(n_samples: int = 384, num_classes: int = 3, channels: int = 1,
                        image_size: int = 8, pool_factor: int = 2, amplitude: float = 1.0,
                        noise: float = 0.3, val_fraction: float = 0.25,
                        seed: int = 0) -> Dataset:
    patterns = [p for p in texture_patterns(image_size).values()
                if _pool_invisible(p, pool_factor)]
    if num_classes > len(patterns):
        raise ValueError(
            f"only {len(patterns)} textures are invisible after {pool_factor}x pooling "
            f"of {image_size}x{image_size} images, {num_classes} classes requested"
        )
    rng = check_random_state(seed)
    y = np.arange(n_samples) % num_classes
    rng.shuffle(y)
    stack = np.stack(patterns[:num_classes])
    signs = rng.choice([-1.0, 1.0], size=n_samples)
    amps = amplitude * rng.uniform(0.5, 1.5, size=n_samples)
    background = rng.normal(size=(n_samples, channels, 1, 1))
    x = (background
         + (signs * amps)[:, None, None, None] * stack[y][:, None, :, :]
         + noise * rng.normal(size=(n_samples, channels, image_size, image_size)))
    return _split(x, y, num_classes, val_fraction, seed, "textures")


def build_dataset(kind: str, **kwargs) -> Dataset:
    if kind == "blobs":
        return make_blob_images(**kwargs)
    if kind == "textures":
        return make_texture_images(**kwargs)
    raise ValueError(f"unknown dataset kind: {kind!r}")
