"""Small text/image encoder pair trained into a shared embedding space."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import tns
from .errors import DimensionError, InputError, PretrainingError, VocabularyError
from .nn import Adam, Linear, Module
from .ops import cosine_similarity
from .tensor import Tensor, as_tensor, no_grad
from .world import PairedSample, World, caption_consistent


class TextEncoder(Module):
    """Mean of token embeddings followed by a 2-layer MLP; order-invariant by design."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, hidden: int = 64):
        self.vocab_size = vocab_size
        self.embedding = Tensor(rng.normal(0.0, 1.0, (vocab_size, dim)), requires_grad=True)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def bag_matrix(self, captions) -> np.ndarray:
        bags = np.zeros((len(captions), self.vocab_size))
        for i, cap in enumerate(captions):
            if len(cap) == 0:
                raise InputError("caption must contain at least one token")
            for t in cap:
                if not 0 <= t < self.vocab_size:
                    raise VocabularyError(f"token id {t} outside vocabulary of size {self.vocab_size}")
                bags[i, t] += 1.0
            bags[i] /= len(cap)
        return bags

    def forward(self, captions) -> Tensor:
        pooled = Tensor(self.bag_matrix(captions)) @ self.embedding
        return self.fc2(self.fc1(pooled).gelu())


class ImageEncoder(Module):
    def __init__(self, image_shape: tuple[int, int, int], dim: int, rng: np.random.Generator, hidden: int = 128):
        self.image_shape = tuple(image_shape)
        self.fc1 = Linear(int(np.prod(image_shape)), hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, images) -> Tensor:
        images = as_tensor(images)
        if tuple(images.shape[-3:]) != self.image_shape:
            raise DimensionError(f"image shape {images.shape} does not end in {self.image_shape}")
        flat = images.reshape(-1, int(np.prod(self.image_shape)))
        return self.fc2(self.fc1(flat).gelu())


class EncoderPair:
    """Text and image towers sharing an embedding dimension."""

    def __init__(self, world: World, dim: int = 32, seed: int = 0):
        self.world = world
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, 11])
        self.text = TextEncoder(len(world.vocabulary), dim, rng)
        self.image = ImageEncoder(world.config.image_shape, dim, rng)
        self.frozen = False
        self.accuracy: float | None = None

    def text_encode(self, caption) -> Tensor:
        """Embed one caption (``[1, d_e]``) or a list of captions (``[N, d_e]``)."""
        if len(caption) and isinstance(caption[0], (int, np.integer)):
            return self.text([list(caption)])
        return self.text(caption)

    def image_encode(self, image) -> Tensor:
        """Embed ``[H, W, C]`` -> ``[1, d_e]`` or ``[B, H, W, C]`` -> ``[B, d_e]``."""
        return self.image(image)

    def parameters(self) -> list[Tensor]:
        return self.text.parameters() + self.image.parameters()

    def freeze(self) -> None:
        self.text.freeze()
        self.image.freeze()
        self.frozen = True

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.text.digest().encode())
        h.update(self.image.digest().encode())
        return h.hexdigest()

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [("text." + k, v.data) for k, v in self.text._all_tensors().items()]
        items += [("image." + k, v.data) for k, v in self.image._all_tensors().items()]
        return sorted(items)

    # -- persistence -------------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        arrays = self.state_arrays()
        tns.write_blocks(path, [a for _, a in arrays])
        meta = {
            "names": [n for n, _ in arrays],
            "d_e": self.dim,
            "seed": self.seed,
            "vocab_hash": vocab_hash(self.world.vocabulary),
            "world_seed": self.world.config.seed,
            "accuracy": self.accuracy,
            "digest": self.digest(),
            **(extra or {}),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path, world: World) -> EncoderPair:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta["vocab_hash"] != vocab_hash(world.vocabulary):
            raise VocabularyError("encoder checkpoint was trained on a different vocabulary")
        pair = cls(world, dim=meta["d_e"], seed=meta["seed"])
        blocks = dict(zip(meta["names"], tns.read_blocks(path)))
        pair.text.load_state_dict({k[5:]: v for k, v in blocks.items() if k.startswith("text.")})
        pair.image.load_state_dict({k[6:]: v for k, v in blocks.items() if k.startswith("image.")})
        pair.accuracy = meta.get("accuracy")
        pair.freeze()
        return pair


def vocab_hash(vocab: list[str]) -> str:
    return hashlib.sha256("\n".join(vocab).encode()).hexdigest()


def info_nce(text_emb: Tensor, image_emb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over in-batch pairs (row i of each side is a positive pair)."""
    t = text_emb / (text_emb * text_emb).sum(axis=-1, keepdims=True).sqrt()
    v = image_emb / (image_emb * image_emb).sum(axis=-1, keepdims=True).sqrt()
    logits = (t @ v.T) * (1.0 / temperature)
    n = logits.shape[0]
    eye = np.eye(n)

    def xent(lg: Tensor) -> Tensor:
        shift = Tensor(lg.data.max(axis=-1, keepdims=True))
        lse = (lg - shift).exp().sum(axis=-1, keepdims=True).log() + shift
        return -((lg - lse) * eye).sum() * (1.0 / n)

    return (xent(logits) + xent(logits.T)) * 0.5


def retrieval_accuracy(
    encoders: EncoderPair,
    samples: list[PairedSample],
    batch_size: int = 16,
    criterion: str = "exact",
    caption_index: int = 0,
) -> float:
    """Top-1 caption->image retrieval inside consecutive chunks of ``batch_size``.

    ``exact`` counts a hit only for the paired image. ``consistent`` also
    accepts any image whose attributes satisfy every attribute the caption
    mentions, since the caption cannot tell such images apart.
    """
    hits = total = 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            if len(chunk) < 2:
                continue
            caps = [s.captions[caption_index] for s in chunk]
            t = encoders.text_encode(caps).data
            v = encoders.image_encode(np.stack([s.image for s in chunk])).data
            t = t / np.linalg.norm(t, axis=1, keepdims=True)
            v = v / np.linalg.norm(v, axis=1, keepdims=True)
            best = np.argmax(t @ v.T, axis=1)
            for i, j in enumerate(best):
                if criterion == "exact":
                    hits += int(j == i)
                else:
                    hits += int(j == i or caption_consistent(caps[i], chunk[j].attributes))
                total += 1
    return hits / max(total, 1)


def contrastive_pretrain(
    world: World,
    samples: list[PairedSample],
    epochs: int = 40,
    temperature: float = 0.07,
    batch_size: int = 32,
    lr: float = 2e-3,
    dim: int = 32,
    seed: int = 0,
    held_out: int = 200,
    target: float = 0.90,
    eval_batch: int = 16,
    log=None,
) -> EncoderPair:
    """Train the encoder pair with InfoNCE, check held-out retrieval, then freeze.

    The last ``held_out`` samples never enter training. The gate uses
    attribute-consistent retrieval (see :func:`retrieval_accuracy`); the exact
    pair statistic is capped well below 0.9 by captions that mention only
    3-8 of the attributes.
    """
    if len(samples) < 500:
        raise InputError(f"contrastive pretraining needs >= 500 samples, got {len(samples)}")
    train, test = samples[:-held_out], samples[-held_out:]
    pair = EncoderPair(world, dim=dim, seed=seed)
    opt = Adam(pair.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 12])
    images = np.stack([s.image for s in train])
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            caps = [train[i].captions[rng.integers(len(train[i].captions))] for i in idx]
            loss = info_nce(pair.text_encode(caps), pair.image_encode(images[idx]), temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {loss.item():.4f}")
    pair.accuracy = retrieval_accuracy(pair, test, batch_size=eval_batch, criterion="consistent")
    pair.freeze()
    if pair.accuracy < target:
        raise PretrainingError(
            f"held-out retrieval accuracy {pair.accuracy:.4f} below {target}", pair.accuracy
        )
    return pair


def paired_cosine_gap(encoders: EncoderPair, samples: list[PairedSample]) -> float:
    """Mean paired (image, caption) cosine minus mean unpaired cosine."""
    with no_grad():
        t = encoders.text_encode([s.captions[0] for s in samples]).data
        v = encoders.image_encode(np.stack([s.image for s in samples])).data
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    sims = t @ v.T
    n = len(samples)
    paired = np.trace(sims) / n
    unpaired = (sims.sum() - np.trace(sims)) / (n * n - n)
    return float(paired - unpaired)


def text_cosine(encoders: EncoderPair, a, b) -> float:
    with no_grad():
        return cosine_similarity(encoders.text_encode(a), encoders.text_encode(b)).item()
