"""Alternating two-stream training, checkpointing and inference.

Per iteration the reconstruction stream (image -> latent) takes one Adam
step, then the synthesis stream (caption -> latent) takes one. The streams
only see each other through detached hidden features in the transfer loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tns
from .cmd import CmdModule, compose_latent
from .encoders import EncoderPair
from .errors import (
    ConfigError, DivergenceError, InputError, NegativeSamplingError, NumericError, ParameterError, SplitError,
)
from .losses import (
    LossWeights, clip_loss, cmt_loss, dt_loss, mse_loss, pair_loss, rec_loss,
    reconstruction_objective, synthesis_objective,
)
from .nn import Adam
from .tensor import Tensor, concat, no_grad
from .world import PairedSample, World

log = logging.getLogger(__name__)

CKPT_FORMAT = "anyface-ckpt v1"
SYNTHESIS_TERMS = ("dt", "cmt_t", "clip")
RECONSTRUCTION_TERMS = ("mse", "cmt_i", "rec")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    steps: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m_split: int = 6
    n_split: int = 2
    loss: LossWeights = field(default_factory=LossWeights)
    latent_loss: str = "dt"
    cmd_depth: int = 3
    cmd_heads: int = 4
    share_cmd: bool = False
    dataset: str | None = None
    encoders: str | None = None
    out_dir: str | None = None
    checkpoint_interval: int = 500
    eval_interval: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (negatives are drawn in-batch)", "batch_size")
        if self.latent_loss not in ("dt", "pair"):
            raise ConfigError("latent_loss must be 'dt' or 'pair'", "latent_loss")
        if self.m_split < 0 or self.n_split < 0:
            raise ConfigError("split sizes must be non-negative", "m_split")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        loss_known = {f.name for f in fields(LossWeights)}
        top, loss = {}, {}
        for key, value in data.items():
            if key == "loss" and isinstance(value, dict):
                for sub, v in value.items():
                    if sub not in loss_known:
                        raise ConfigError(f"unknown config key 'loss.{sub}'", f"loss.{sub}")
                    loss[sub] = v
            elif key.startswith("loss."):
                sub = key[5:]
                if sub not in loss_known:
                    raise ConfigError(f"unknown config key '{key}'", key)
                loss[sub] = value
            elif key in known:
                top[key] = value
            else:
                raise ConfigError(f"unknown config key '{key}'", key)
        try:
            return cls(loss=LossWeights(**loss), **top)
        except (TypeError, ParameterError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """Holds both CMD streams, their optimizers and the frozen world/encoders."""

    def __init__(self, config: TrainConfig, world: World, encoders: EncoderPair, samples: list[PairedSample]):
        c = world.config
        if config.m_split + config.n_split != c.n_layers:
            raise SplitError(f"m_split + n_split must equal {c.n_layers}")
        if len(samples) < config.batch_size:
            raise InputError(f"need at least batch_size={config.batch_size} samples, got {len(samples)}")
        self.config = config
        self.world = world
        self.encoders = encoders
        self.samples = samples
        self.weights = config.loss
        self.w_bar = world.w_bar

        self.images = np.stack([s.image for s in samples])
        self.targets = world.invert(self.images)
        with no_grad():
            self.image_features = encoders.image_encode(self.images).data
            caps = [cap for s in samples for cap in s.captions]
            emb = encoders.text_encode(caps).data
        self.n_captions = len(samples[0].captions)
        self.caption_features = emb.reshape(len(samples), self.n_captions, -1)

        cmd_args = dict(
            embed_dim=encoders.dim, n_layers=c.n_layers, latent_dim=c.latent_dim,
            depth=config.cmd_depth, heads=config.cmd_heads, seed=config.seed,
        )
        self.cmd_syn = CmdModule(**cmd_args)
        self.cmd_rec = self.cmd_syn if config.share_cmd else CmdModule(**cmd_args)
        adam = dict(lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.adam_eps)
        self.opt_syn = Adam(self.cmd_syn.parameters(), **adam)
        self.opt_rec = Adam(self.cmd_rec.parameters(), **adam)
        self.rng = np.random.default_rng([config.seed, 31])
        self.step_count = 0
        self.history: list[dict[str, float]] = []
        self._frozen = self.frozen_digests()

    # -- batches -----------------------------------------------------------------------

    def draw_batch(self, rng: np.random.Generator | None = None) -> dict:
        rng = self.rng if rng is None else rng
        B = self.config.batch_size
        if B < 2:
            raise NegativeSamplingError("batch_size must be >= 2 for in-batch negatives")
        idx = rng.choice(len(self.samples), size=B, replace=False)
        cap = rng.integers(self.n_captions, size=B)
        # partner j != i for every element: shift by a non-zero offset
        partner = (np.arange(B) + rng.integers(1, B, size=B)) % B
        neg_cap = rng.integers(self.n_captions, size=B)
        z = self.world.sample_z(rng, B)
        return {"idx": idx, "cap": cap, "neg_idx": idx[partner], "neg_cap": neg_cap, "z": z}

    def batch_ids(self, batch: dict) -> tuple[list[int], list[int]]:
        pos = [self.samples[i].id for i in batch["idx"]]
        neg = [self.samples[i].id for i in batch["neg_idx"]]
        return pos, neg

    def _text_features(self, batch) -> tuple[np.ndarray, np.ndarray]:
        pos = self.caption_features[batch["idx"], batch["cap"]][:, None, :]
        neg = self.caption_features[batch["neg_idx"], batch["neg_cap"]][:, None, :]
        return pos, neg

    # -- the two streams ------------------------------------------------------------------

    def reconstruction_losses(self, batch: dict, h_t_target: np.ndarray | None) -> tuple[Tensor, dict, np.ndarray]:
        idx = batch["idx"]
        w_i, h_i = self.cmd_rec(Tensor(self.image_features[idx][:, None, :]))
        i_hat = self.world.decode(w_i)
        parts = {
            "mse": mse_loss(w_i, self.targets[idx]),
            "rec": rec_loss(i_hat, self.images[idx]),
            "cmt_i": cmt_loss(h_i, h_t_target) if h_t_target is not None else Tensor(0.0),
        }
        return reconstruction_objective(parts, self.weights), parts, h_i.data

    def synthesis_losses(self, batch: dict, h_i_target: np.ndarray | None, neg_features=None) -> tuple[Tensor, dict, np.ndarray]:
        B = len(batch["idx"])
        cfg = self.config
        pos, neg = self._text_features(batch)
        if neg_features is not None:
            neg = neg_features
        w_all, h_all = self.cmd_syn(Tensor(np.concatenate([pos, neg])))
        w_t, w_neg, h_t = w_all[:B], w_all[B:], h_all[:B]
        w_c = self.world.mapping_network(batch["z"], cfg.n_split).reshape(B, cfg.n_split, -1)
        image = self.world.decode(compose_latent(w_t, w_c, cfg.m_split, cfg.n_split))
        f_it = self.encoders.image_encode(image)
        target = self.targets[batch["idx"]]
        if cfg.latent_loss == "dt":
            latent_term = dt_loss(w_t, w_neg, target, self.w_bar, self.weights.margin, self.weights.dt_orientation)
        else:
            latent_term = pair_loss(w_t, target, self.weights.pair_norm_order)
        parts = {
            "dt": latent_term,
            "cmt_t": cmt_loss(h_t, h_i_target) if h_i_target is not None else Tensor(0.0),
            "clip": clip_loss(Tensor(pos[:, 0, :]), f_it),
        }
        return synthesis_objective(parts, self.weights), parts, h_t.data

    def _apply(self, loss: Tensor, opt: Adam, module: CmdModule, what: str) -> None:
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"{what} loss is not finite at step {self.step_count}", self.step_count)
        opt.zero_grad()
        module.zero_grad()
        loss.backward()
        opt.step()

    def _guarded(self, fn, *args):
        try:
            return fn(*args)
        except NumericError as exc:
            raise DivergenceError(f"non-finite values at step {self.step_count}: {exc}", self.step_count) from exc

    def reconstruction_step(self, batch: dict, h_t_target: np.ndarray | None = None) -> dict:
        loss, parts, h_i = self._guarded(self.reconstruction_losses, batch, h_t_target)
        self._apply(loss, self.opt_rec, self.cmd_rec, "reconstruction")
        report = {k: float(v.item()) for k, v in parts.items()}
        report["L_T"] = float(loss.item())
        report["_h_i"] = h_i
        return report

    def synthesis_step(self, batch: dict, h_i_target: np.ndarray | None = None) -> dict:
        loss, parts, _ = self._guarded(self.synthesis_losses, batch, h_i_target)
        self._apply(loss, self.opt_syn, self.cmd_syn, "synthesis")
        report = {k: float(v.item()) for k, v in parts.items()}
        report["L_S"] = float(loss.item())
        return report

    def step(self) -> dict:
        batch = self.draw_batch()
        use_cmt = self.weights.lambda_cmt > 0
        h_t_target = None
        if use_cmt:
            pos, _ = self._text_features(batch)
            with no_grad():
                h_t_target = self._guarded(self.cmd_syn.encode, Tensor(pos)).data
        rec = self.reconstruction_step(batch, h_t_target)
        syn = self.synthesis_step(batch, rec.pop("_h_i") if use_cmt else None)
        rec.pop("_h_i", None)
        self.step_count += 1
        row = {"step": self.step_count, "L_S": syn["L_S"], "L_T": rec["L_T"]}
        row.update({k: syn[k] for k in SYNTHESIS_TERMS})
        row.update({k: rec[k] for k in RECONSTRUCTION_TERMS})
        self.history.append(row)
        return row

    def train(self, steps: int | None = None, callback: Callable[[Trainer], None] | None = None) -> Trainer:
        steps = self.config.steps if steps is None else steps
        cfg = self.config
        out = Path(cfg.out_dir) if cfg.out_dir else None
        for _ in range(steps):
            self.step()
            if callback is not None and cfg.eval_interval and self.step_count % cfg.eval_interval == 0:
                callback(self)
            if out is not None and cfg.checkpoint_interval and self.step_count % cfg.checkpoint_interval == 0:
                self.save_checkpoint(out / f"model_step{self.step_count}.ckpt")
        if self._frozen != self.frozen_digests():  # pragma: no cover - guards the freeze contract
            raise RuntimeError("frozen components changed during training")
        return self

    # -- evaluation helpers ---------------------------------------------------------------

    def probe_losses(self, seed: int = 12345) -> dict:
        """Losses on a fixed batch without updating anything."""
        batch = self.draw_batch(np.random.default_rng([self.config.seed, seed]))
        pos, _ = self._text_features(batch)
        with no_grad():
            h_t = self.cmd_syn.encode(Tensor(pos)).data
            l_t, rparts, h_i = self.reconstruction_losses(batch, h_t)
            l_s, sparts, _ = self.synthesis_losses(batch, h_i)
        out = {k: float(v.item()) for k, v in {**rparts, **sparts}.items()}
        out.update(L_T=float(l_t.item()), L_S=float(l_s.item()))
        return out

    def frozen_digests(self) -> dict[str, str]:
        return {"world": self.world.digest(), "encoders": self.encoders.digest()}

    def model(self) -> SynthesisModel:
        return SynthesisModel(self.world, self.encoders, self.cmd_syn, self.config.m_split, self.config.n_split)

    # -- checkpoints -------------------------------------------------------------------------

    def _tensor_entries(self) -> list[tuple[str, np.ndarray]]:
        entries = [("syn." + k, v) for k, v in self.cmd_syn.state_dict().items()]
        if not self.config.share_cmd:
            entries += [("rec." + k, v) for k, v in self.cmd_rec.state_dict().items()]
        for tag, opt in (("opt_syn", self.opt_syn), ("opt_rec", self.opt_rec)):
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                entries += [(f"{tag}.m.{i}", m), (f"{tag}.v.{i}", v)]
        return entries

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = self._tensor_entries()
        header = {
            "format": CKPT_FORMAT,
            "config": {k: v for k, v in self.config.to_dict().items() if k != "out_dir"},
            "world": self.world.config_dict(),
            "step": self.step_count,
            "frozen": self.frozen_digests(),
            "tensors": [name for name, _ in entries],
            "adam_t": [self.opt_syn.t, self.opt_rec.t],
            "rng": self.rng.bit_generator.state,
            "history": self.history,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for _, arr in entries:
                fh.write(tns.encode(arr))
        return path

    def load_checkpoint(self, path) -> Trainer:
        header, blocks = read_checkpoint(path)
        if header["frozen"] != self.frozen_digests():
            raise InputError("checkpoint was trained against different frozen components")
        self.cmd_syn.load_state_dict({k[4:]: v for k, v in blocks.items() if k.startswith("syn.")})
        if not self.config.share_cmd:
            self.cmd_rec.load_state_dict({k[4:]: v for k, v in blocks.items() if k.startswith("rec.")})
        for tag, opt, t in (("opt_syn", self.opt_syn, header["adam_t"][0]), ("opt_rec", self.opt_rec, header["adam_t"][1])):
            n = len(opt.params)
            opt.load_state(t, [blocks[f"{tag}.m.{i}"] for i in range(n)], [blocks[f"{tag}.v.{i}"] for i in range(n)])
        self.rng.bit_generator.state = header["rng"]
        self.step_count = header["step"]
        self.history = header["history"]
        return self


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CKPT_FORMAT:
            raise InputError(f"{path} is not a model checkpoint")
        arrays = tns.read_stream(fh)
    return header, dict(zip(header["tensors"], arrays))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class SynthesisModel:
    """Inference-only view: the synthesis stream plus frozen world and encoders."""

    def __init__(self, world: World, encoders: EncoderPair, cmd: CmdModule, m_split: int, n_split: int):
        self.world = world
        self.encoders = encoders
        self.cmd = cmd
        self.m_split = m_split
        self.n_split = n_split

    @classmethod
    def from_checkpoint(cls, path, world: World, encoders: EncoderPair) -> SynthesisModel:
        header, blocks = read_checkpoint(path)
        if header["frozen"] != {"world": world.digest(), "encoders": encoders.digest()}:
            raise InputError("checkpoint was trained against different frozen components")
        cfg = TrainConfig.from_dict({k: v for k, v in header["config"].items()})
        c = world.config
        cmd = CmdModule(embed_dim=encoders.dim, n_layers=c.n_layers, latent_dim=c.latent_dim,
                        depth=cfg.cmd_depth, heads=cfg.cmd_heads, seed=cfg.seed)
        cmd.load_state_dict({k[4:]: v for k, v in blocks.items() if k.startswith("syn.")})
        return cls(world, encoders, cmd, cfg.m_split, cfg.n_split)

    def text_latent(self, captions) -> np.ndarray:
        """CMD latent for one caption set (``[L, d]``)."""
        return self.text_latents([captions])[0]

    def text_latents(self, caption_sets) -> np.ndarray:
        for caps in caption_sets:
            if not 1 <= len(caps) <= 10:
                raise InputError(f"between 1 and 10 captions are required, got {len(caps)}")
        counts = {len(c) for c in caption_sets}
        out = np.zeros((len(caption_sets),) + self.world.config.latent_shape)
        with no_grad():
            for n in counts:
                rows = [i for i, c in enumerate(caption_sets) if len(c) == n]
                flat = [cap for i in rows for cap in caption_sets[i]]
                feats = self.encoders.text_encode(flat).data.reshape(len(rows), n, -1)
                w, _ = self.cmd(Tensor(feats))
                out[rows] = w.data
        return out

    def synthesize(self, captions, style_seed: int) -> tuple[np.ndarray, np.ndarray]:
        images, latents = self.synthesize_many([captions], [style_seed])
        return images[0], latents[0]

    def synthesize_many(self, caption_sets, style_seeds) -> tuple[np.ndarray, np.ndarray]:
        w_t = self.text_latents(caption_sets)
        w_c = np.stack([self.world.style_rows(s, self.n_split) for s in style_seeds])
        with no_grad():
            latent = compose_latent(Tensor(w_t), Tensor(w_c), self.m_split, self.n_split).data
        return self.world.decode_array(latent), latent

    def manipulate(self, source, captions, m_split: int) -> np.ndarray:
        L = self.world.config.n_layers
        if not 0 <= m_split <= L:
            raise SplitError(f"m_split must lie in [0, {L}], got {m_split}")
        w_src = self.world.invert(source, weighted=True)
        w_t = self.text_latent(captions)
        n = L - m_split
        latent = compose_latent(Tensor(w_t), Tensor(w_src[:n]), m_split, n).data
        return self.world.decode_array(latent)
