"""Synthetic face world: frozen mapping network, affine-tanh decoder, captions.

Everything here is a pure function of one integer seed. The decoder is
``image = tanh(vec(w) @ A + b)`` with ``A`` of full row rank in the latent
dimension, which is what lets :meth:`World.invert` act as an exact inversion
oracle.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionError, InputError, RangeError
from .tensor import Tensor, as_tensor

# (attribute, positive synonyms, negative synonyms)
ATTRIBUTES: list[tuple[str, tuple[str, str], tuple[str, str]]] = [
    ("smiling", ("smiling", "grinning"), ("unsmiling", "stern")),
    ("wavy-hair", ("wavy-hair", "curly-hair"), ("straight-hair", "sleek-hair")),
    ("eyeglasses", ("eyeglasses", "spectacles"), ("no-glasses", "bare-eyed")),
    ("beard", ("bearded", "stubbled"), ("clean-shaven", "beardless")),
    ("blond-hair", ("blond", "fair-haired"), ("dark-haired", "brunette")),
    ("bangs", ("bangs", "fringe"), ("no-bangs", "open-forehead")),
    ("makeup", ("made-up", "lipstick"), ("no-makeup", "bare-faced")),
    ("young", ("young", "youthful"), ("old", "elderly")),
    ("pale-skin", ("pale", "fair-skinned"), ("tanned", "olive-skinned")),
    ("mouth-open", ("mouth-open", "lips-parted"), ("mouth-closed", "lips-sealed")),
    ("big-nose", ("big-nose", "large-nose"), ("small-nose", "button-nose")),
    ("arched-brows", ("arched-brows", "high-brows"), ("flat-brows", "straight-brows")),
]

CAPTIONS_PER_SAMPLE = 10
MIN_MENTIONS, MAX_MENTIONS = 3, 8


def attribute_names(k: int) -> list[str]:
    names = [a[0] for a in ATTRIBUTES[:k]]
    names += [f"attr-{i}" for i in range(len(names), k)]
    return names


def build_vocabulary(k: int) -> list[str]:
    """Token id ``4*attr + 2*polarity + synonym``; polarity 1 asserts the attribute."""
    vocab = []
    for i in range(k):
        if i < len(ATTRIBUTES):
            _, pos, neg = ATTRIBUTES[i]
        else:
            pos = (f"attr-{i}", f"attr-{i}-alt")
            neg = (f"not-attr-{i}", f"not-attr-{i}-alt")
        vocab.extend([neg[0], neg[1], pos[0], pos[1]])
    return vocab


def token_attribute(token: int) -> tuple[int, int]:
    """Return (attribute index, asserted polarity) for a token id."""
    return token // 4, (token // 2) % 2


def caption_from_attributes(attributes, subset_seed) -> list[int]:
    a = np.asarray(attributes, dtype=int)
    rng = np.random.default_rng(subset_seed)
    k = len(a)
    size = int(rng.integers(MIN_MENTIONS, MAX_MENTIONS + 1))
    size = min(size, k)
    chosen = rng.choice(k, size=size, replace=False)
    return [int(4 * j + 2 * a[j] + rng.integers(2)) for j in chosen]


def caption_consistent(caption, attributes) -> bool:
    return all(attributes[j] == pol for j, pol in map(token_attribute, caption))


def caption_text(caption, vocab: list[str]) -> str:
    return " ".join(vocab[t] for t in caption)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_layers: int = 8
    latent_dim: int = 32
    height: int = 16
    width: int = 16
    channels: int = 3
    n_attributes: int = 12
    z_dim: int = 16
    mapping_hidden: int = 64

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width * self.channels

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.n_layers, self.latent_dim)


@dataclass
class PairedSample:
    id: int
    attributes: np.ndarray
    latent_true: np.ndarray
    image: np.ndarray
    captions: list[list[int]] = field(default_factory=list)


class World:
    """Frozen generative components of the synthetic face domain."""

    def __init__(self, config: WorldConfig | None = None, **overrides):
        if config is None:
            config = WorldConfig(**overrides)
        self.config = config
        c = config
        L, d, P, k = c.n_layers, c.latent_dim, c.n_pixels, c.n_attributes
        if L * d > P:
            raise DimensionError(f"latent size {L * d} exceeds pixel count {P}; decoder cannot be injective")
        ss = np.random.SeedSequence(c.seed)
        map_seed, attr_seed, dec_seed = ss.spawn(3)

        rng = np.random.default_rng(map_seed)
        self._map_w1 = rng.normal(0.0, 1.0 / np.sqrt(c.z_dim), (c.z_dim, c.mapping_hidden))
        self._map_b1 = rng.normal(0.0, 0.1, c.mapping_hidden)
        self._map_w2 = rng.normal(0.0, 1.0 / np.sqrt(c.mapping_hidden), (c.mapping_hidden, L * d))
        self._map_mean = rng.normal(0.0, 0.5, L * d)
        # coarse rows carry most of the style variation, fine rows most of the attributes
        self._style_gain = np.repeat(np.linspace(1.0, 0.4, L), d)
        self._attr_gain = np.repeat(np.linspace(0.4, 1.0, L), d)

        rng = np.random.default_rng(attr_seed)
        self._attr_map = rng.normal(0.0, 0.6 / np.sqrt(k), (k, L * d))

        # re-draw until the decoder's linear part is injective
        for attempt in range(100):
            rng = np.random.default_rng([int(dec_seed.generate_state(1)[0]), attempt])
            A = rng.normal(0.0, 0.9 / np.sqrt(0.7 * L * d), (L * d, P))
            if np.linalg.matrix_rank(A) == L * d:
                break
        else:  # pragma: no cover
            raise RuntimeError("could not draw an injective decoder")
        self._dec_A = A
        self._dec_b = rng.normal(0.0, 0.2, P)
        self._dec_pinv = np.linalg.pinv(A)
        self._A_tensor = Tensor(A)
        self._b_tensor = Tensor(self._dec_b)
        self._avg_cache: dict[int, np.ndarray] = {}
        self.vocabulary = build_vocabulary(k)

    # -- frozen networks -----------------------------------------------------------

    def mapping_network(self, z, rows: int | None = None) -> np.ndarray:
        """Map noise ``z`` to its first ``rows`` latent rows.

        ``z`` of shape ``[z_dim]`` or ``[1, z_dim]`` gives ``[rows, d]``; ``[B, z_dim]``
        with B > 1 gives ``[B, rows, d]``.
        """
        c = self.config
        rows = c.n_layers if rows is None else rows
        if rows > c.n_layers or rows < 0:
            raise DimensionError(f"rows={rows} outside [0, {c.n_layers}]")
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1 or z.shape[0] == 1
        zb = z.reshape(-1, c.z_dim)
        h = zb @ self._map_w1 + self._map_b1
        h = np.where(h > 0, h, 0.2 * h)
        out = (h @ self._map_w2) * self._style_gain + self._map_mean
        out = out.reshape(-1, c.n_layers, c.latent_dim)[:, :rows]
        return out[0] if single else out

    def sample_z(self, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
        shape = (self.config.z_dim,) if count is None else (count, self.config.z_dim)
        return rng.standard_normal(shape)

    def style_rows(self, style_seed: int, rows: int) -> np.ndarray:
        rng = np.random.default_rng([self.config.seed, 2, int(style_seed)])
        return self.mapping_network(self.sample_z(rng), rows)

    def attribute_latent(self, attributes) -> np.ndarray:
        a = np.asarray(attributes, dtype=np.float64)
        out = ((2.0 * a - 1.0) @ self._attr_map) * self._attr_gain
        return out.reshape(a.shape[:-1] + self.config.latent_shape)

    def average_latent(self, sample_count: int = 10000, mapping=None) -> np.ndarray:
        """Empirical mean of mapping-network outputs over ``sample_count`` noise draws.

        ``mapping`` substitutes another callable ``z[B, z_dim] -> [B, L, d]``; results
        for the built-in network are cached per sample count.
        """
        if mapping is None and sample_count in self._avg_cache:
            return self._avg_cache[sample_count]
        rng = np.random.default_rng([self.config.seed, 1])
        z = self.sample_z(rng, sample_count)
        fn = mapping or (lambda zz: self.mapping_network(zz, self.config.n_layers))
        mean = np.asarray(fn(z)).reshape(sample_count, *self.config.latent_shape).mean(axis=0)
        if mapping is None:
            self._avg_cache[sample_count] = mean
        return mean

    @cached_property
    def w_bar(self) -> np.ndarray:
        return self.average_latent(10000)

    # -- decoder and inversion -------------------------------------------------------

    def _check_latent(self, shape) -> None:
        if tuple(shape[-2:]) != self.config.latent_shape:
            raise DimensionError(f"latent shape {tuple(shape)} does not end in {self.config.latent_shape}")

    def pre_activation(self, w) -> np.ndarray:
        w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
        self._check_latent(w.shape)
        c = self.config
        flat = w.reshape(-1, c.n_layers * c.latent_dim)
        pre = flat @ self._dec_A + self._dec_b
        return pre.reshape(w.shape[:-2] + c.image_shape)

    def decode(self, w) -> Tensor:
        """Differentiable decode of ``[L, d]`` or ``[B, L, d]`` latents."""
        w = as_tensor(w)
        self._check_latent(w.shape)
        c = self.config
        lead = w.shape[:-2]
        flat = w.reshape(-1, c.n_layers * c.latent_dim)
        img = (flat @ self._A_tensor + self._b_tensor).tanh()
        return img.reshape(lead + c.image_shape)

    def decode_array(self, w) -> np.ndarray:
        return np.tanh(self.pre_activation(w))

    def invert(self, image, weighted: bool = False) -> np.ndarray:
        """Exact latent for a decoder image (``[H, W, C]`` or batched).

        ``weighted`` solves each image by least squares scaled with the tanh
        slope, so off-manifold noise (8-bit quantization) is projected in
        pixel space instead of being amplified near saturation.
        """
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        c = self.config
        if tuple(img.shape[-3:]) != c.image_shape:
            raise DimensionError(f"image shape {img.shape} does not end in {c.image_shape}")
        if not np.all(np.isfinite(img)) or np.any(np.abs(img) > 1.0):
            raise InputError("image values must lie in [-1, 1]")
        if np.any(np.abs(img) >= 1.0 - 1e-12):
            raise RangeError("image has pixels at +-1 where atanh is singular")
        flat = img.reshape(-1, c.n_pixels)
        pre = np.arctanh(flat) - self._dec_b
        if weighted:
            slope = 1.0 - flat**2
            w = np.stack([np.linalg.lstsq((self._dec_A * g).T, p * g, rcond=None)[0] for g, p in zip(slope, pre)])
        else:
            w = pre @ self._dec_pinv
        return w.reshape(img.shape[:-3] + c.latent_shape)

    # -- dataset surrogate ---------------------------------------------------------------

    def sample_paired(self, sample_id: int, seed: int | None = None) -> PairedSample:
        c = self.config
        seed = c.seed if seed is None else seed
        rng = np.random.default_rng([int(seed), 0, int(sample_id)])
        attrs = (rng.random(c.n_attributes) < 0.5).astype(np.int64)
        z = self.sample_z(rng)
        latent = self.attribute_latent(attrs) + self.mapping_network(z)
        image = self.decode_array(latent)
        captions: list[list[int]] = []
        j = 0
        while len(captions) < CAPTIONS_PER_SAMPLE:
            cap = caption_from_attributes(attrs, [int(seed), 3, int(sample_id), j])
            j += 1
            if cap not in captions:
                captions.append(cap)
        return PairedSample(int(sample_id), attrs, latent, image, captions)

    # -- identity ------------------------------------------------------------------------------

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {
            "map_w1": self._map_w1, "map_b1": self._map_b1, "map_w2": self._map_w2,
            "map_mean": self._map_mean, "attr_map": self._attr_map,
            "dec_A": self._dec_A, "dec_b": self._dec_b,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.frozen_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def config_dict(self) -> dict:
        return asdict(self.config)
