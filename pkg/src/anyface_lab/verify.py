"""Finite-difference suite over every loss and differentiable forward."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cmd import CmdModule
from .encoders import EncoderPair
from .gradcheck import finite_diff_check
from .losses import clip_loss, cmt_loss, dt_loss, mse_loss, pair_loss, rec_loss
from .ops import cosine_similarity, kl_divergence, layer_norm, softmax
from .tensor import Tensor
from .world import World, WorldConfig

# make(rng) -> (scalar function of one Tensor, starting point)
Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    points: int
    flagged: int
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _projected(fn, out_shape, rng):
    """Reduce a tensor-valued map to a scalar with a fixed random weighting."""
    r = Tensor(rng.normal(size=out_shape))
    return lambda x: (fn(x) * r).sum()


def _codes(rng, shape=(8, 4)):
    # positive-mean codes keep cos(x, w_bar) away from the ratio's pole
    return rng.normal(1.0, 0.5, size=shape)


def build_cases(world: World | None = None, encoders: EncoderPair | None = None,
                cmd: CmdModule | None = None) -> dict[str, Case]:
    world = world or World(WorldConfig(seed=0))
    encoders = encoders or EncoderPair(world, seed=0)
    cmd = cmd or CmdModule(embed_dim=encoders.dim, n_layers=world.config.n_layers,
                           latent_dim=world.config.latent_dim, seed=0)
    image_shape = world.config.image_shape
    latent_shape = world.config.latent_shape

    def softmax_case(rng):
        return _projected(lambda x: softmax(x), (3, 5), rng), rng.normal(size=(3, 5))

    def kl_p(rng):
        q = Tensor(rng.dirichlet(np.ones(5), size=2))
        return (lambda x: kl_divergence(softmax(x), q)), rng.normal(size=(2, 5))

    def kl_q(rng):
        p = Tensor(rng.dirichlet(np.ones(5), size=2))
        return (lambda x: kl_divergence(p, softmax(x))), rng.normal(size=(2, 5))

    def cosine_case(rng):
        b = Tensor(rng.normal(size=7))
        return (lambda x: cosine_similarity(x, b)), rng.normal(size=7)

    def layer_norm_case(rng):
        g, b = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        return _projected(lambda x: layer_norm(x, g, b), (3, 6), rng), rng.normal(size=(3, 6))

    def cmt_case(rng):
        target = Tensor(rng.normal(size=(1, 8)))
        return (lambda x: cmt_loss(x, target)), rng.normal(size=(1, 8))

    def pair_case(order):
        def make(rng):
            w = Tensor(rng.normal(size=(8, 4)))
            return (lambda x: pair_loss(x, w, order)), rng.normal(size=(8, 4))
        return make

    def dt_case(orientation, which):
        def make(rng):
            w, w_bar, other = Tensor(_codes(rng)), Tensor(_codes(rng)), Tensor(_codes(rng))
            if which == "w_t":
                f = lambda x: dt_loss(x, other, w, w_bar, margin=2.0, orientation=orientation)
            else:
                f = lambda x: dt_loss(other, x, w, w_bar, margin=2.0, orientation=orientation)
            return f, _codes(rng)
        return make

    def clip_case(rng):
        f_t = Tensor(rng.normal(size=(2, 6)))
        return (lambda x: clip_loss(f_t, x)), rng.normal(size=(2, 6))

    def rec_case(rng):
        target = Tensor(rng.uniform(-0.9, 0.9, size=(4, 4, 3)))
        return (lambda x: rec_loss(x, target)), rng.uniform(-0.9, 0.9, size=(4, 4, 3))

    def mse_case(rng):
        target = Tensor(rng.normal(size=(8, 4)))
        return (lambda x: mse_loss(x, target)), rng.normal(size=(8, 4))

    def cmd_case(rng):
        # one scalar weights both outputs, so the latent and hidden paths are checked together
        n_cap = int(rng.integers(1, 4))
        rw, rh = Tensor(rng.normal(size=latent_shape)), Tensor(rng.normal(size=(1, encoders.dim)))

        def f(x):
            w, h = cmd(x)
            return (w * rw).sum() + (h * rh).sum()
        return f, rng.normal(size=(n_cap, encoders.dim))

    def decoder_case(rng):
        return _projected(world.decode, image_shape, rng), rng.normal(0.0, 0.3, size=latent_shape)

    def image_encoder_case(rng):
        return _projected(encoders.image_encode, (1, encoders.dim), rng), rng.uniform(-0.9, 0.9, size=image_shape)

    def text_encoder_case(rng):
        # tokens are discrete, so differentiate through the pooled embedding instead
        text = encoders.text
        return (_projected(lambda x: text.fc2(text.fc1(x).gelu()), (2, encoders.dim), rng),
                rng.normal(size=(2, encoders.dim)))

    return {
        "softmax": softmax_case,
        "kl_divergence[p]": kl_p,
        "kl_divergence[q]": kl_q,
        "cosine_similarity": cosine_case,
        "layer_norm": layer_norm_case,
        "cmt_loss": cmt_case,
        "pair_loss[l1]": pair_case(1),
        "pair_loss[l2]": pair_case(2),
        "dt_loss[prose,w_t]": dt_case("prose", "w_t"),
        "dt_loss[prose,w_neg]": dt_case("prose", "w_neg"),
        "dt_loss[as-written,w_t]": dt_case("as-written", "w_t"),
        "dt_loss[as-written,w_neg]": dt_case("as-written", "w_neg"),
        "clip_loss": clip_case,
        "rec_loss": rec_case,
        "mse_loss": mse_case,
        "cmd_forward": cmd_case,
        "decode": decoder_case,
        "image_encode": image_encoder_case,
        "text_encode_mlp": text_encoder_case,
    }


def run_suite(points: int = 100, seed: int = 0, max_coords: int | None = 64,
              names: list[str] | None = None, **build_kwargs) -> list[SuiteResult]:
    """Check every case at ``points`` random inputs.

    Inputs with more than ``max_coords`` entries are checked on a random
    coordinate subset per point; the autodiff gradient is always full.
    """
    cases = build_cases(**build_kwargs)
    results = []
    for name, make in cases.items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, sum(name.encode())])
        worst, flagged = 0.0, 0
        start = time.perf_counter()
        for _ in range(points):
            f, x0 = make(rng)
            coords = None
            if max_coords is not None and x0.size > max_coords:
                coords = rng.choice(x0.size, size=max_coords, replace=False)
            report = finite_diff_check(f, x0, coords=coords)
            worst = max(worst, report.max_rel_error)
            flagged += len(report.flagged)
        results.append(SuiteResult(name, worst, points, flagged, time.perf_counter() - start))
    return results
