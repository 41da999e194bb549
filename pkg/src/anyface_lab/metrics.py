"""Toy-scale evaluation: Fréchet distance, identity retrieval, diversity, ablations.

All metrics live in the image encoder's feature space, which stands in for
both the perceptual and the identity networks used on real faces.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoders import EncoderPair
from .errors import AnyFaceError, InputError, NotPSDError, NumericError, SampleCountError
from .ops import matrix_sqrt_psd
from .tensor import no_grad
from .trainer import SynthesisModel, TrainConfig, Trainer
from .world import PairedSample, World

log = logging.getLogger(__name__)

JITTER = 1e-6
THREADS_ENV = "ANYFACE_LAB_THREADS"


def _as_2d(features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    return f[:, None] if f.ndim == 1 else f


def frechet_distance(features_a, features_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets."""
    a, b = _as_2d(features_a), _as_2d(features_b)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    for name, f in (("a", a), ("b", b)):
        if f.shape[0] < d + 1:
            raise SampleCountError(f"set {name} has {f.shape[0]} samples; need at least {d + 1}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    eye = JITTER * np.eye(d)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    try:
        root_a = matrix_sqrt_psd(cov_a).data
        middle = root_a @ cov_b @ root_a
        cross = matrix_sqrt_psd(0.5 * (middle + middle.T)).data
    except NotPSDError as exc:
        raise NumericError(f"covariance not PSD after jitter: {exc}") from exc
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def _normalise(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def rfrr_from_features(generated: np.ndarray, gallery: np.ndarray) -> float:
    """Fraction of rows whose best cosine match in ``gallery`` is the same row index."""
    generated, gallery = np.asarray(generated, float), np.asarray(gallery, float)
    if len(gallery) == 0:
        raise InputError("empty gallery")
    if generated.shape != gallery.shape:
        raise InputError(f"feature shapes differ: {generated.shape} vs {gallery.shape}")
    best = np.argmax(_normalise(generated) @ _normalise(gallery).T, axis=1)
    return float(np.mean(best == np.arange(len(gallery))))


def image_features(encoders: EncoderPair, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return encoders.image_encode(np.asarray(images)).data


def rfrr(model: SynthesisModel, gallery: list[PairedSample], caption_index: int = 0, style_seed: int = 0) -> float:
    """Identity retrieval of images synthesized from each member's own caption."""
    if len(gallery) == 0:
        raise InputError("empty gallery")
    if len(gallery) < 2:
        raise InputError("gallery needs at least 2 members")
    images, _ = model.synthesize_many([[s.captions[caption_index]] for s in gallery],
                                      [style_seed + s.id for s in gallery])
    gen = image_features(model.encoders, images)
    real = image_features(model.encoders, np.stack([s.image for s in gallery]))
    return rfrr_from_features(gen, real)


def pairwise_distance_mean(features: np.ndarray) -> float:
    f = np.asarray(features, dtype=np.float64)
    if len(f) < 2:
        raise InputError("diversity needs at least 2 draws")
    sq = (f * f).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
    iu = np.triu_indices(len(f), k=1)
    return float(np.sqrt(d2[iu]).mean())


def diversity_score(model: SynthesisModel, caption, draws: int, first_seed: int = 0) -> float:
    """Mean pairwise l2 distance between features of ``draws`` style-seeded outputs."""
    if draws < 2:
        raise InputError(f"diversity needs at least 2 draws, got {draws}")
    caps = caption if caption and isinstance(caption[0], (list, tuple)) else [caption]
    images, _ = model.synthesize_many([list(caps)] * draws, list(range(first_seed, first_seed + draws)))
    return pairwise_distance_mean(image_features(model.encoders, images))


def mean_average_cosine(model: SynthesisModel, captions: list) -> float:
    """Mean cos(w_t, w_bar) of the text latents over single-caption prompts."""
    w_t = model.text_latents([[c] for c in captions]).reshape(len(captions), -1)
    w_bar = model.world.w_bar.reshape(1, -1)
    return float(np.mean(_normalise(w_t) @ _normalise(w_bar).T))


@dataclass
class EvalSet:
    """Held-out samples plus cached real-image features for toy-FID."""

    samples: list[PairedSample]
    real_features: np.ndarray
    diversity_prompts: int = 16
    diversity_draws: int = 8

    @classmethod
    def build(cls, encoders: EncoderPair, samples: list[PairedSample], **kwargs) -> EvalSet:
        return cls(samples, image_features(encoders, np.stack([s.image for s in samples])), **kwargs)

    def toy_fid(self, model: SynthesisModel) -> float:
        images, _ = model.synthesize_many([[s.captions[0]] for s in self.samples], [s.id for s in self.samples])
        return frechet_distance(image_features(model.encoders, images), self.real_features)

    def diversity(self, model: SynthesisModel) -> float:
        prompts = self.samples[: self.diversity_prompts]
        return float(np.mean([diversity_score(model, [s.captions[0]], self.diversity_draws) for s in prompts]))

    def evaluate(self, model: SynthesisModel) -> dict[str, float]:
        return {
            "fid": self.toy_fid(model),
            "rfrr": rfrr(model, self.samples[:32]),
            "diversity": self.diversity(model),
            "cos_w_bar": mean_average_cosine(model, [s.captions[0] for s in self.samples]),
        }


def default_variants(base: TrainConfig) -> dict[str, TrainConfig]:
    return {
        "full": base,
        "no-cmt": replace(base, loss=replace(base.loss, lambda_cmt=0.0)),
        "pairwise": replace(base, latent_loss="pair"),
    }


def thread_count(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_variant(name: str, config: TrainConfig, seed: int, world: World, encoders: EncoderPair,
                train_samples: list[PairedSample], eval_set: EvalSet, curve_every: int = 100) -> dict:
    """Train one (variant, seed) job and evaluate it. Errors are captured, not raised."""
    cfg = replace(config, seed=seed, out_dir=None)
    curve: list[tuple[int, float]] = []
    start = time.perf_counter()
    try:
        trainer = Trainer(cfg, world, encoders, train_samples)
        curve.append((0, eval_set.toy_fid(trainer.model())))
        while trainer.step_count < cfg.steps:
            trainer.train(min(curve_every, cfg.steps - trainer.step_count))
            curve.append((trainer.step_count, eval_set.toy_fid(trainer.model())))
        metrics = eval_set.evaluate(trainer.model())
        return {"variant": name, "seed": seed, "ok": True, "curve": curve,
                "seconds": time.perf_counter() - start, **metrics}
    except AnyFaceError as exc:
        log.warning("variant %s seed %d failed: %s", name, seed, exc)
        return {"variant": name, "seed": seed, "ok": False, "error": f"{type(exc).__name__}: {exc}", "curve": curve}


def steps_to_reach(curve: list[tuple[int, float]], level: float) -> int | None:
    for step, value in curve:
        if value <= level:
            return step
    return None


def ablation_report(variants: dict[str, TrainConfig], seeds, world: World, encoders: EncoderPair,
                    train_samples: list[PairedSample], eval_set: EvalSet, out_dir=None,
                    curve_every: int = 100, threads: int | None = None) -> dict:
    """Train every (variant, seed), returning rows plus per-seed comparisons."""
    jobs = [(name, cfg, seed) for name, cfg in variants.items() for seed in seeds]
    threads = thread_count() if threads is None else threads

    def work(job):
        name, cfg, seed = job
        return run_variant(name, cfg, seed, world, encoders, train_samples, eval_set, curve_every)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(job) for job in jobs]
    report = {"rows": rows, "comparisons": compare_variants(rows)}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def compare_variants(rows: list[dict]) -> dict:
    """Per-seed outcomes of the collapse and distillation comparisons."""
    by = {(r["variant"], r["seed"]): r for r in rows if r.get("ok")}
    seeds = sorted({s for _, s in by})
    out: dict = {}
    if any(v == "pairwise" for v, _ in by) and any(v == "full" for v, _ in by):
        pairs = [(by[("full", s)], by[("pairwise", s)]) for s in seeds if ("full", s) in by and ("pairwise", s) in by]
        out["pairwise_less_diverse"] = [p["diversity"] < f["diversity"] for f, p in pairs]
        out["pairwise_closer_to_average"] = [p["cos_w_bar"] > f["cos_w_bar"] for f, p in pairs]
    if any(v == "no-cmt" for v, _ in by) and any(v == "full" for v, _ in by):
        pairs = [(by[("full", s)], by[("no-cmt", s)]) for s in seeds if ("full", s) in by and ("no-cmt", s) in by]
        out["cmt_fid_not_worse"] = [f["fid"] <= n["fid"] for f, n in pairs]
        faster = []
        for f, n in pairs:
            target = n["curve"][-1][1]
            sf, sn = steps_to_reach(f["curve"], target), steps_to_reach(n["curve"], target)
            faster.append(sf is not None and sn is not None and sf < sn)
        out["cmt_reaches_faster"] = faster
    return out


def write_report(report: dict, out_dir) -> Path:
    from .ppm import plot_lines, write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "variant", "seed", "toy_fid"])
        for row in report["rows"]:
            for step, value in row["curve"]:
                writer.writerow([step, row["variant"], row["seed"], repr(float(value))])
    summary = {
        "rows": [{k: v for k, v in row.items() if k != "curve"} for row in report["rows"]],
        "comparisons": report["comparisons"],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for seed in sorted({r["seed"] for r in report["rows"]}):
        series = {}
        for row in report["rows"]:
            if row["seed"] == seed and row["curve"]:
                steps, values = zip(*row["curve"])
                series[row["variant"]] = (np.array(steps), np.array(values))
        write_ppm(out / f"fid_seed{seed}.ppm", plot_lines(series), raw=True)
    return out
