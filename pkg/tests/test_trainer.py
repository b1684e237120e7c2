import json

import numpy as np
import pytest

from changecap import duda as D
from changecap.evalkit import parse_change_type, score_run
from changecap.kvconfig import ConfigError
from changecap.models import MODEL_KINDS, Captioner
from changecap.numkernel import Adam
from changecap.scenegen import GenConfig, build_dataset
from changecap.trainer import (CHECKPOINT, TrainConfig, TrainingError, _tokens_for, load_features,
                               load_train_config, predict_split, read_predictions, train,
                               train_step, validation_loss, write_predictions)

SMALL = dict(d_hidden=16, d_embed=8, d_latent=16, att_channels=8, conv_width1=8, conv_width2=8)


@pytest.fixture(scope="module")
def feats(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    build_dataset(GenConfig(num_scenes=20), 0, out)
    return load_features(out)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lambda_l1, cfg.lambda_ent) == (2.5e-3, 1e-4)
        assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.model) == (1e-3, 16, 20, "duda")

    @pytest.mark.parametrize("bad", [dict(model="cnn"), dict(epochs=-1), dict(lr=0.0),
                                     dict(batch_size=0), dict(lambda_l1=-1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("model = capt-att\nepochs = 3\nlr = 0.002\n")
        cfg = load_train_config(path, epochs=5)
        assert (cfg.model, cfg.epochs, cfg.lr) == ("capt-att", 5, 0.002)
        path.write_text("epochz = 3\n")
        with pytest.raises(ConfigError):
            load_train_config(path)


class TestFeatures:
    def test_alignment_and_splits(self, feats):
        assert feats.x_bef.shape == (40, 32, 8, 8) and feats.pix.shape == (40, 3, 8, 8)
        sizes = [len(feats.indices(s)) for s in ("train", "val", "test")]
        assert sizes == [34, 2, 4]
        with pytest.raises(ValueError):
            feats.indices("dev")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_features(tmp_path)


class TestTraining:
    def test_zero_epochs_returns_initial_checkpoint(self, feats, tmp_path):
        cfg = TrainConfig(model="capt-rep-diff", epochs=0, seed=3, **SMALL)
        res = train(cfg, feats, tmp_path)
        assert res.log.epochs == []
        loaded, meta = Captioner.load(tmp_path / CHECKPOINT)
        fresh = Captioner(cfg.model_config(8), res.model.vocab, seed=3)
        assert all(np.array_equal(loaded.params[k].data, fresh.params[k].data) for k in fresh.params)
        assert meta["epoch"] == 0

    def test_log_and_best_checkpoint(self, feats, tmp_path):
        cfg = TrainConfig(model="duda", epochs=3, seed=0, **SMALL)
        seen = []
        res = train(cfg, feats, tmp_path, progress=seen.append)
        log = res.log
        assert [e["epoch"] for e in log.epochs] == [1, 2, 3] and seen == log.epochs
        vals = [e["val_loss"] for e in log.epochs]
        assert log.best_val_loss == min(vals)
        assert log.best_epoch == 1 + int(np.argmin(vals))
        loaded, meta = Captioner.load(tmp_path / CHECKPOINT)
        assert meta["epoch"] == log.best_epoch
        assert all(np.array_equal(loaded.params[k].data, res.model.params[k].data)
                   for k in loaded.params)
        assert meta["encoder"]["fingerprint"] == D.FrozenEncoder().fingerprint()
        json.dumps(log.to_json())

    def test_encoder_untouched(self, feats):
        before = D.FrozenEncoder().fingerprint()
        train(TrainConfig(model="capt-dual-att", epochs=1, **SMALL), feats)
        assert D.FrozenEncoder().fingerprint() == before == feats.encoder_fingerprint

    def test_deterministic(self, feats):
        cfg = TrainConfig(model="capt-att", epochs=2, seed=4, **SMALL)
        a, b = train(cfg, feats), train(cfg, feats)
        assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data)
                   for k in a.model.params)
        assert predict_split(a.model, feats, "test") == predict_split(b.model, feats, "test")
        c = train(TrainConfig(model="capt-att", epochs=2, seed=5, **SMALL), feats)
        assert any(not np.array_equal(a.model.params[k].data, c.model.params[k].data)
                   for k in a.model.params)

    def test_non_finite_loss_is_reported(self, feats):
        cfg = TrainConfig(model="capt-rep-diff", **SMALL)
        idx = feats.indices("train")[:4]
        vocab = D.Vocabulary.build(c for i in idx for c in feats.pairs[i].captions)
        model = Captioner(cfg.model_config(8), vocab)
        model.params["out.b"].data[:] = np.nan
        batch = feats.batch(idx, _tokens_for(vocab, [feats.pairs[i] for i in idx]))
        with pytest.raises(TrainingError, match="non-finite"):
            train_step(model, Adam(model.parameters()), batch, cfg)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_fixed_batch_loss_decreases(feats, kind):
    """Loss on one batch falls at every one of the first 20 steps for at least 9 of 10 seeds."""
    idx = feats.indices("train")[:16]
    pairs = [feats.pairs[i] for i in idx]
    vocab = D.Vocabulary.build(c for p in pairs for c in p.captions)
    batch = feats.batch(idx, _tokens_for(vocab, pairs))
    good = 0
    for seed in range(10):
        cfg = TrainConfig(model=kind, seed=seed)
        model = Captioner(cfg.model_config(8), vocab, seed)
        opt = Adam(model.parameters(), lr=cfg.lr)
        losses = [float(train_step(model, opt, batch, cfg)[0].total.data) for _ in range(21)]
        good += all(b < a for a, b in zip(losses, losses[1:]))
    assert good >= 9


@pytest.fixture(scope="module")
def trained(feats):
    return train(TrainConfig(model="duda", epochs=1, **SMALL), feats).model


class TestPrediction:
    def test_one_record_per_pair(self, feats, trained, tmp_path):
        path = tmp_path / "pred.jsonl"
        recs = predict_split(trained, feats, "test", path)
        ids = [feats.pairs[i].id for i in feats.indices("test")]
        assert [r["id"] for r in recs] == ids
        assert read_predictions(path) == json.loads(json.dumps(recs))
        for r in recs:
            assert r["model"] == "duda"
            assert len(r["alpha"]) == len(r["tokens"])
            assert np.array(r["att_before"]).shape == (8, 8)
            parse_change_type(r["caption"])
        report = score_run(recs, [feats.pairs[i] for i in feats.indices("test")])
        assert report["total"]["n"] == len(ids)

    def test_bad_prediction_file(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            read_predictions(path)

    def test_write_is_sorted_and_stable(self, tmp_path):
        path = tmp_path / "p.jsonl"
        write_predictions(path, [{"id": "b", "caption": "x"}, {"caption": "y", "id": "a"}])
        assert path.read_text() == '{"caption": "x", "id": "b"}\n{"caption": "y", "id": "a"}\n'

    def test_validation_loss_empty(self, feats, trained):
        assert validation_loss(trained, feats, []) is None
        assert validation_loss(trained, feats, feats.indices("val")) > 0
