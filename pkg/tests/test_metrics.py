import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rateldm import metrics, train
from rateldm.codec import CodecTrainConfig, train_codec
from rateldm.data import EVENT_CLASSES, CorpusConfig, build_corpus
from rateldm.diffusion import SamplerConfig

K = len(EVENT_CLASSES)


class TestFrechetDistance:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(40, 8))
        assert metrics.frechet_distance(a, a.copy()) < 1e-6

    def test_offset_gaussians_oracle(self):
        # FD of two unit Gaussians with means offset by v is ||v||^2
        rng = np.random.default_rng(1)
        v = np.array([1.0, -0.5, 0.25, 0.0, 2.0, -1.0, 0.5, 0.75])
        a = rng.normal(size=(10000, 8))
        b = rng.normal(size=(10000, 8)) + v
        fd = metrics.frechet_distance(a, b)
        expected = float(np.sum(v**2))
        assert abs(fd - expected) < 0.05 * expected

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(30, 6))
        b = rng.normal(size=(30, 6)) + 0.5
        assert abs(metrics.frechet_distance(a, b) - metrics.frechet_distance(b, a)) < 1e-9

    @given(st.integers(0, 10**6))
    @settings(max_examples=15, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(12, 4))
        b = rng.normal(size=(12, 4)) * rng.uniform(0.5, 2)
        assert metrics.frechet_distance(a, b) >= 0.0

    def test_degenerate_set_error(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match="dim"):
            metrics.frechet_distance(rng.normal(size=(8, 8)), rng.normal(size=(30, 8)))


class TestInceptionScore:
    def test_identical_vectors_one(self):
        p = np.tile([0.2, 0.3, 0.5], (10, 1))
        assert metrics.inception_score(p) == pytest.approx(1.0, abs=1e-9)

    def test_one_hot_per_class_gives_k(self):
        # n=K one-hots, one per class: KL(p_i || uniform) = log K for each
        p = np.eye(K)
        assert metrics.inception_score(p) == pytest.approx(K, rel=1e-9)

    def test_uniform_gives_one(self):
        p = np.full((7, K), 1.0 / K)
        assert metrics.inception_score(p) == pytest.approx(1.0, abs=1e-9)

    @given(st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(K) * rng.uniform(0.2, 5), size=30)
        score = metrics.inception_score(p)
        assert 1.0 - 1e-9 <= score <= K + 1e-9

    def test_off_simplex_error(self):
        with pytest.raises(ValueError, match="simplex"):
            metrics.inception_score(np.array([[0.5, 0.2]]))


class TestPairedKL:
    def test_identical_zero(self):
        rng = np.random.default_rng(4)
        p = rng.dirichlet(np.ones(K), size=20)
        assert metrics.paired_kl(p, p.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform_analytic(self):
        # KL(one-hot || uniform) = log K, exactly, for every pair
        ref = np.eye(K)[np.arange(K)]
        gen = np.full((K, K), 1.0 / K)
        assert metrics.paired_kl(gen, ref) == pytest.approx(np.log(K), abs=1e-9)

    @given(st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        gen = rng.dirichlet(np.ones(K), size=10)
        ref = rng.dirichlet(np.ones(K), size=10)
        assert metrics.paired_kl(gen, ref) >= 0.0

    def test_unpaired_error(self):
        with pytest.raises(ValueError, match="unpaired"):
            metrics.paired_kl(np.full((3, K), 1 / K), np.full((4, K), 1 / K))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Medium corpus at two rates: big enough for full-rank FD covariance."""
    root = tmp_path_factory.mktemp("metrics")
    out = root / "corpus"
    entries = build_corpus(CorpusConfig(out_dir=str(out), per_class=25,
                                        rates=(16000, 48000), seed=4))
    mels = [train.entry_mel(out, e, write_cache=True).values
            for e in entries if e.split == "train"]
    codec, info = train_codec(mels, mels[:10],
                              CodecTrainConfig(steps=80, batch_size=24, val_interval=40))
    codec_path = root / "codec.ckpt"
    train.save_codec_checkpoint(codec_path, codec, info["scale_factor"])
    for e in entries:
        metrics.mel_at_16k(out, e, write_cache=True)
    return {"root": root, "dir": out, "entries": entries, "codec": codec,
            "codec_path": codec_path, "scale": info["scale_factor"]}


@pytest.fixture(scope="module")
def classifier(corpus):
    clf, info = metrics.train_classifier(
        corpus["entries"], corpus["dir"],
        metrics.ClassifierTrainConfig(steps=500, seed=0))
    return clf, info


class TestClassifier:
    def test_gate_and_shapes(self, corpus, classifier):
        clf, info = classifier
        assert info["test_acc"] >= 0.9
        probs, emb = metrics.classify_mels(
            clf, [metrics.mel_at_16k(corpus["dir"], corpus["entries"][0])])
        assert probs.shape == (1, K)
        assert emb.shape == (1, metrics.EMBED_DIM)
        assert probs.sum() == pytest.approx(1.0, abs=1e-5)

    def test_overfit_train_accuracy(self, classifier):
        _, info = classifier
        assert info["train_acc"] >= 0.99

    def test_deterministic(self, corpus):
        cfg = metrics.ClassifierTrainConfig(steps=30, seed=9, accuracy_gate=0.0)
        a, _ = metrics.train_classifier(corpus["entries"], corpus["dir"], cfg)
        b, _ = metrics.train_classifier(corpus["entries"], corpus["dir"], cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_gate_failure_errors(self, corpus):
        cfg = metrics.ClassifierTrainConfig(steps=1, seed=0)
        with pytest.raises(RuntimeError, match="gate"):
            metrics.train_classifier(corpus["entries"], corpus["dir"], cfg)


class TestEvaluateSets:
    def test_real_against_itself(self, corpus, classifier):
        clf, info = classifier
        test_e = [e for e in corpus["entries"] if e.split == "test" and e.rate_hz == 16000]
        mels = [metrics.mel_at_16k(corpus["dir"], e) for e in test_e]
        classes = [e.event_class for e in test_e]
        stats = metrics.evaluate_sets(mels, [m.copy() for m in mels], classes, clf)
        assert stats["fd"] < 1e-6
        assert stats["kl"] < 1e-6
        test_acc_16k = float(np.mean([
            metrics.classify_mels(clf, [m])[0].argmax() == EVENT_CLASSES.index(c)
            for m, c in zip(mels, classes)
        ]))
        assert stats["prompt_acc"] == pytest.approx(test_acc_16k, abs=1e-9)

    def test_unpaired_error(self, corpus, classifier):
        clf, _ = classifier
        m = [metrics.mel_at_16k(corpus["dir"], corpus["entries"][0])]
        with pytest.raises(ValueError, match="paired"):
            metrics.evaluate_sets(m, m + m, ["low_tone"], clf)


@pytest.fixture(scope="module")
def untrained_ldm(corpus):
    from rateldm.model import LdmConfig

    cfg = train.ExperimentConfig(mode="multi_rate", rates=(16000, 48000), steps=1,
                                 batch_size=4, seed=6, num_train_steps=100,
                                 val_interval=1)
    path = corpus["root"] / "untrained.ckpt"
    train.train_ldm(cfg, corpus["entries"], corpus["dir"], corpus["codec"],
                    corpus["scale"], path)
    return path


class TestEvaluateModel:
    def test_report_rates_and_chance_level(self, corpus, classifier, untrained_ldm):
        clf, _ = classifier
        sampler = SamplerConfig(num_steps=10, guidance_scale=3.0, seed=0)
        report = metrics.evaluate_model(untrained_ldm, corpus["codec_path"],
                                        corpus["entries"], corpus["dir"], clf, sampler,
                                        rates=(16000, 48000), gl_iters=4)
        assert sorted(report.per_rate) == [16000, 48000]
        for rate, stats in report.per_rate.items():
            assert stats["failures"] == 0
            assert stats["n"] >= metrics.EMBED_DIM + 1
            # untrained model: prompt accuracy within 3 sigma of chance
            p = 1.0 / K
            sigma = np.sqrt(p * (1 - p) / stats["n"])
            assert abs(stats["prompt_acc"] - p) <= 3 * sigma
        js = report.to_json()
        assert '"16000"' in js and '"48000"' in js
        table = report.table()
        assert "PromptAcc" in table

    def test_failures_above_threshold_abort(self, corpus, classifier, untrained_ldm,
                                            monkeypatch):
        clf, _ = classifier

        def boom(*a, **kw):
            raise RuntimeError("vocoder exploded")

        monkeypatch.setattr(metrics, "griffin_lim", boom)
        sampler = SamplerConfig(num_steps=2, seed=0)
        with pytest.raises(RuntimeError, match="generations failed"):
            metrics.evaluate_model(untrained_ldm, corpus["codec_path"],
                                   corpus["entries"], corpus["dir"], clf, sampler,
                                   rates=(16000,), gl_iters=2)

    def test_deterministic_given_seed(self, corpus, classifier, untrained_ldm):
        clf, _ = classifier
        sampler = SamplerConfig(num_steps=5, seed=3)
        a = metrics.evaluate_model(untrained_ldm, corpus["codec_path"],
                                   corpus["entries"], corpus["dir"], clf, sampler,
                                   rates=(16000,), gl_iters=3)
        b = metrics.evaluate_model(untrained_ldm, corpus["codec_path"],
                                   corpus["entries"], corpus["dir"], clf, sampler,
                                   rates=(16000,), gl_iters=3)
        assert a.to_json() == b.to_json()
