import hashlib
import json

import numpy as np
import pytest

from anyface_lab.errors import ConfigError, DivergenceError, InputError, NegativeSamplingError, SplitError
from anyface_lab.losses import LossWeights
from anyface_lab.tensor import no_grad
from anyface_lab.trainer import SynthesisModel, TrainConfig, Trainer, read_checkpoint


def short(world, encoders, samples, **kwargs):
    return Trainer(TrainConfig(**kwargs), world, encoders, samples)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.steps, cfg.learning_rate, cfg.m_split, cfg.n_split) == (16, 2000, 1e-3, 6, 2)
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="'lr'") as info:
            TrainConfig.from_dict({"lr": 0.1})
        assert info.value.key == "lr"

    def test_dotted_and_nested_loss_keys(self):
        a = TrainConfig.from_dict({"loss.margin": 0.5, "steps": 3})
        b = TrainConfig.from_dict({"loss": {"margin": 0.5}, "steps": 3})
        assert a == b and a.loss.margin == 0.5

    def test_unknown_loss_key(self):
        with pytest.raises(ConfigError, match="loss.gamma"):
            TrainConfig.from_dict({"loss.gamma": 1})

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"loss.lambda_clip": -1})

    def test_small_batch(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)

    def test_split_must_cover_latent(self, world, encoders, samples):
        with pytest.raises(SplitError):
            short(world, encoders, samples, m_split=5, n_split=2)


class TestSteps:
    def test_negatives_come_from_other_samples(self, world, encoders, samples):
        tr = short(world, encoders, samples)
        for _ in range(50):
            pos, neg = tr.batch_ids(tr.draw_batch())
            assert all(p != n for p, n in zip(pos, neg))

    def test_negative_sampling_needs_two(self, world, encoders, samples):
        tr = short(world, encoders, samples)
        tr.config.batch_size = 1
        with pytest.raises(NegativeSamplingError):
            tr.draw_batch()

    def test_degenerate_synthesis_loss_is_zero(self, world, encoders, samples):
        tr = short(world, encoders, samples, loss=LossWeights(lambda_cmt=0.0, lambda_clip=0.0, margin=0.0))
        batch = tr.draw_batch()
        pos, _ = tr._text_features(batch)
        with no_grad():
            loss, parts, _ = tr.synthesis_losses(batch, None, neg_features=pos)
        assert loss.item() == 0.0

    def test_latent_regression_converges(self, world, encoders, samples):
        tr = short(world, encoders, samples[:64], loss=LossWeights(lambda_cmt=0.0, lambda_rec=0.0))
        first = tr.probe_losses()["mse"]
        for _ in range(500):
            tr.reconstruction_step(tr.draw_batch())
        assert tr.probe_losses()["mse"] < 0.2 * first

    def test_streams_are_gradient_isolated(self, world, encoders, samples):
        tr = short(world, encoders, samples)
        batch = tr.draw_batch()
        h_i = tr.reconstruction_losses(batch, None)[2]
        loss, _, _ = tr.synthesis_losses(batch, h_i)
        tr.cmd_rec.zero_grad()
        loss.backward()
        assert all(p.grad is None for p in tr.cmd_rec.parameters())
        assert any(p.grad is not None for p in tr.cmd_syn.parameters())

    def test_frozen_components_unchanged(self, world, encoders, samples):
        before = (world.digest(), encoders.digest())
        short(world, encoders, samples).train(100)
        assert (world.digest(), encoders.digest()) == before

    def test_divergence_reports_step(self, world, encoders, samples):
        tr = short(world, encoders, samples)
        tr.train(3)
        tr.cmd_syn.parameters()[0].data[...] = np.nan
        with pytest.raises(DivergenceError) as info:
            tr.step()
        assert info.value.step == 3


class TestDeterminism:
    def test_loss_history(self, world, encoders, samples):
        a = short(world, encoders, samples).train(20).history
        b = short(world, encoders, samples).train(20).history
        assert json.dumps(a) == json.dumps(b)

    def test_checkpoint_bytes(self, world, encoders, samples, tmp_path):
        paths = []
        for name in ("a", "b"):
            tr = short(world, encoders, samples, out_dir=str(tmp_path / name)).train(15)
            paths.append(tr.save_checkpoint(tmp_path / name / "model_step15.ckpt"))
        digests = {hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}
        assert len(digests) == 1


class TestCheckpoint:
    def test_interval_files(self, world, encoders, samples, tmp_path):
        short(world, encoders, samples, out_dir=str(tmp_path), checkpoint_interval=5).train(12)
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["model_step10.ckpt", "model_step5.ckpt"]

    def test_header(self, world, encoders, samples, tmp_path):
        tr = short(world, encoders, samples).train(4)
        header, blocks = read_checkpoint(tr.save_checkpoint(tmp_path / "m.ckpt"))
        assert header["step"] == 4
        assert header["frozen"] == {"world": world.digest(), "encoders": encoders.digest()}
        assert len(blocks) == len(header["tensors"])

    def test_round_trip_probe(self, world, encoders, samples, tmp_path):
        tr = short(world, encoders, samples).train(25)
        path = tr.save_checkpoint(tmp_path / "m.ckpt")
        loaded = short(world, encoders, samples).load_checkpoint(path)
        a, b = tr.probe_losses(), loaded.probe_losses()
        assert all(abs(a[k] - b[k]) <= 1e-9 for k in a)

    def test_resume_continues_identically(self, world, encoders, samples, tmp_path):
        tr = short(world, encoders, samples).train(10)
        path = tr.save_checkpoint(tmp_path / "m.ckpt")
        tr.train(5)
        resumed = short(world, encoders, samples).load_checkpoint(path).train(5)
        assert resumed.history == tr.history

    def test_wrong_frozen_components(self, world, encoders, samples, tmp_path):
        from anyface_lab.encoders import EncoderPair

        path = short(world, encoders, samples).train(1).save_checkpoint(tmp_path / "m.ckpt")
        with pytest.raises(InputError):
            SynthesisModel.from_checkpoint(path, world, EncoderPair(world, seed=99))


class TestTrainedRun:
    def test_synthesis_loss_falls(self, trained):
        ls = [row["L_S"] for row in trained.history]
        assert len(ls) == 2000
        assert np.mean(ls[-100:]) < np.mean(ls[:100])

    def test_all_losses_finite(self, trained):
        assert all(np.isfinite(v) for row in trained.history for v in row.values())


@pytest.fixture(scope="module")
def model(trained):
    return trained.model()


class TestInference:
    def test_style_seed_only_changes_coarse_rows(self, model, samples):
        cap = [samples[0].captions[0]]
        img1, w1 = model.synthesize(cap, 1)
        img2, w2 = model.synthesize(cap, 2)
        assert not np.array_equal(img1, img2)
        np.testing.assert_array_equal(w1[model.n_split:], w2[model.n_split:])

    def test_duplicate_captions(self, model, samples):
        cap = samples[0].captions[0]
        one, _ = model.synthesize([cap], 4)
        ten, _ = model.synthesize([cap] * 10, 4)
        np.testing.assert_allclose(one, ten, atol=1e-12)

    @pytest.mark.parametrize("count", [0, 11])
    def test_caption_count(self, model, samples, count):
        with pytest.raises(InputError):
            model.synthesize([samples[0].captions[0]] * count, 0)

    def test_matches_caption_better_than_mismatch(self, model, eval_samples):
        enc = model.encoders
        caps = [[s.captions[0]] for s in eval_samples[:200]]
        images, _ = model.synthesize_many(caps, list(range(200)))
        with no_grad():
            f_img = enc.image_encode(images).data
            f_txt = enc.text_encode([c[0] for c in caps]).data
        unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)
        sims = unit(f_img) @ unit(f_txt).T
        assert np.mean(np.diag(sims)) > np.mean(np.diag(np.roll(sims, 1, axis=1)))

    def test_manipulate_zero_split_is_identity(self, model, eval_samples):
        src = eval_samples[0].image
        assert np.abs(model.manipulate(src, [eval_samples[1].captions[0]], 0) - src).max() < 1e-6

    def test_manipulate_full_split_is_text_only(self, model, eval_samples):
        cap = [eval_samples[1].captions[0]]
        out = model.manipulate(eval_samples[0].image, cap, model.world.config.n_layers)
        np.testing.assert_allclose(out, model.world.decode_array(model.text_latent(cap)), atol=1e-12)

    def test_manipulate_bad_split(self, model, eval_samples):
        with pytest.raises(SplitError):
            model.manipulate(eval_samples[0].image, [eval_samples[1].captions[0]], 9)

    def test_checkpoint_model_matches_live(self, trained, world, encoders, tmp_path, samples):
        path = trained.save_checkpoint(tmp_path / "m.ckpt")
        loaded = SynthesisModel.from_checkpoint(path, world, encoders)
        cap = [samples[3].captions[2]]
        assert loaded.synthesize(cap, 7)[0].tobytes() == trained.model().synthesize(cap, 7)[0].tobytes()
