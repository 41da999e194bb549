"""On-disk dataset: ``manifest.json`` plus ``sample_<id>.tns`` / ``sample_<id>.json`` pairs.

Each ``.tns`` file holds three concatenated blocks: latent ``[L, d]``, image
``[H, W, C]`` and all caption token ids as one flat float block. The sidecar
records the byte offset of every block and the caption lengths needed to
split the token block.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import tns
from .errors import InputError
from .world import PairedSample, World, WorldConfig

MANIFEST = "manifest.json"


def write_dataset(world: World, count: int, out, first_id: int = 0) -> Path:
    if count <= 0:
        raise InputError("count must be positive")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = list(range(first_id, first_id + count))
    for sid in ids:
        s = world.sample_paired(sid)
        tokens = np.array([t for cap in s.captions for t in cap], dtype=np.float64)
        offsets = tns.write_blocks(out / f"sample_{sid}.tns", [s.latent_true, s.image, tokens])
        sidecar = {
            "id": sid,
            "attributes": [int(a) for a in s.attributes],
            "offsets": {"latent": offsets[0], "image": offsets[1], "captions": offsets[2]},
            "caption_lengths": [len(c) for c in s.captions],
        }
        (out / f"sample_{sid}.json").write_text(json.dumps(sidecar, sort_keys=True))
    manifest = {
        "world": world.config_dict(),
        "world_digest": world.digest(),
        "sample_ids": ids,
        "vocabulary": world.vocabulary,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_sample(directory: Path, sid: int) -> PairedSample:
    sidecar = json.loads((directory / f"sample_{sid}.json").read_text())
    latent, image, tokens = tns.read_blocks(directory / f"sample_{sid}.tns")
    captions, pos = [], 0
    for n in sidecar["caption_lengths"]:
        captions.append([int(t) for t in tokens[pos:pos + n]])
        pos += n
    return PairedSample(int(sidecar["id"]), np.array(sidecar["attributes"]), latent, image, captions)


def load_dataset(path) -> tuple[World, list[PairedSample]]:
    directory = Path(path)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    world = World(WorldConfig(**manifest["world"]))
    if world.digest() != manifest["world_digest"]:
        raise InputError("regenerated world does not match the manifest digest")
    samples = [read_sample(directory, sid) for sid in manifest["sample_ids"]]
    return world, samples


def manifest_hash(path) -> str:
    return hashlib.sha256((Path(path) / MANIFEST).read_bytes()).hexdigest()
