import numpy as np
import pytest

from longscore import autograd as ag
from longscore.corpus import Corpus, EssayRecord, Vocab, synthetic_corpus
from longscore.errors import ConfigurationError, TrainingAborted
from longscore.model import ModelConfig, build_classifier
from longscore.training import (ConstantModel, EchoModel, OptimState, TrainConfig, adamw_step,
                                evaluate, linear_lr, make_batches, split_dev, train)


def _corpus(n, seed=0):
    return synthetic_corpus(n, 0, seed=seed, min_words=10, max_words=30)


# ---------------------------------------------------------------- dev split


def test_split_dev_sizes_and_partition():
    corpus = _corpus(100)
    tr, dev = split_dev(corpus, 0.1, seed=1)
    assert len(tr) == 90 and len(dev) == 10
    ids = [r.essay_id for r in tr.records + dev.records]
    assert sorted(ids) == sorted(r.essay_id for r in corpus.records)
    assert len(set(ids)) == 100


def test_split_dev_is_deterministic():
    corpus = _corpus(100)
    assert split_dev(corpus, 0.1, 3)[1].records == split_dev(corpus, 0.1, 3)[1].records
    assert split_dev(corpus, 0.1, 3)[1].records != split_dev(corpus, 0.1, 4)[1].records


def test_split_dev_is_score_stratified():
    corpus = _corpus(200, seed=2)
    _, dev = split_dev(corpus, 0.1, seed=0)
    for s in range(1, 5):
        total = sum(r.score == s for r in corpus.records)
        in_dev = sum(r.score == s for r in dev.records)
        assert abs(in_dev - 0.1 * total) <= 1


def test_split_dev_empty_dev_is_configuration_error():
    with pytest.raises(ConfigurationError):
        split_dev(_corpus(12), 0.01, 0)


# ---------------------------------------------------------------- optimizer


def _step(p, g, lr, wd):
    t = ag.parameter(p)
    t.grad = np.asarray(g, dtype=float)
    adamw_step([("p", t)], OptimState(), lr, TrainConfig(lr=lr, weight_decay=wd))
    return t.data


def test_adamw_pure_decay():
    p = np.array([2.0, -1.0])
    np.testing.assert_allclose(_step(p, [0.0, 0.0], 0.1, 0.1), 0.99 * p, rtol=1e-15)


def test_adamw_first_step_is_sign_step():
    assert _step([1.0], [0.5], 0.1, 0.0)[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_leaves_frozen_parameters_untouched():
    frozen = ag.Tensor(np.array([1.0, 2.0]))
    frozen.grad = np.ones(2)
    before = frozen.data.tobytes()
    adamw_step([("f", frozen)], OptimState(), 0.1, TrainConfig())
    assert frozen.data.tobytes() == before


def test_adamw_nan_gradient_aborts():
    t = ag.parameter([1.0])
    t.grad = np.array([np.nan])
    with pytest.raises(TrainingAborted, match="p"):
        adamw_step([("p", t)], OptimState(), 0.1, TrainConfig())


def test_adamw_converges_on_a_scalar_quadratic():
    p = ag.parameter([0.0])
    cfg, state = TrainConfig(lr=0.3, weight_decay=0.0), OptimState()
    for s in range(200):
        p.grad = 2 * (p.data - 3.0)
        adamw_step([("p", p)], state, linear_lr(s, 200, cfg.lr), cfg)
    assert abs(p.data[0] - 3.0) < 1e-3


def test_linear_lr():
    assert linear_lr(0, 10, 0.5) == 0.5
    assert linear_lr(10, 10, 0.5) == 0.0
    assert linear_lr(5, 10, 0.5) == 0.25
    with pytest.raises(ConfigurationError):
        linear_lr(0, 0, 0.5)


def test_train_config_defaults():
    assert TrainConfig().lr == 1e-6 and TrainConfig().batch_size == 4
    ssm = TrainConfig.for_architecture("ssm")
    assert ssm.lr == 1e-5 and ssm.batch_size == 8
    with pytest.raises(ConfigurationError):
        TrainConfig(dev_fraction=1.0)


def test_long_sequences_fall_back_to_batch_of_one():
    batches = make_batches([0, 1, 2, 3, 4, 5, 6, 7], [10, 10, 3000, 10, 10, 10, 10, 10], 4, 2048)
    assert batches == [[0], [1], [2], [3], [4, 5, 6, 7]]


# ---------------------------------------------------------------- training loop


def _tiny(arch="full-attention", seed=0, **kw):
    extra = {"sliding-window": {"window_radius": 2}, "segment-recurrent": {"segment_length": 8},
             "ssm": {"state_dim": 3}}.get(arch, {})
    cfg = ModelConfig(arch, vocab_size=400, n_classes=4, d_model=8, max_length=64, **extra, **kw)
    return build_classifier(cfg, seed)


def _setup(n=60):
    corpus = _corpus(n, seed=4)
    return corpus, Vocab.from_corpus(corpus)


def _inject(curve, snapshots):
    def metric(model, epoch):
        snapshots[epoch] = model.state()
        return curve[epoch - 1]
    return metric


def test_early_stopping_returns_best_epoch_weights():
    corpus, vocab = _setup()
    model = _tiny()
    snaps = {}
    report = train(model, corpus, TrainConfig(lr=1e-3, patience=3), vocab,
                   dev_metric=_inject([0.2, 0.5, 0.4, 0.4, 0.4, 0.9, 0.9, 0.9, 0.9, 0.9], snaps))
    assert report.stopped_epoch == 5 and report.best_epoch == 2
    assert report.dev_curve == [0.2, 0.5, 0.4, 0.4, 0.4]
    for name, t in model.named_parameters():
        assert t.data.tobytes() == snaps[2][name].tobytes()


def test_monotone_curve_runs_every_epoch():
    corpus, vocab = _setup(40)
    model = _tiny()
    snaps = {}
    curve = [0.1 * i for i in range(1, 11)]
    report = train(model, corpus, TrainConfig(lr=1e-3, patience=20), vocab, dev_metric=_inject(curve, snaps))
    assert report.stopped_epoch == 10 and report.best_epoch == 10
    assert all(t.data.tobytes() == snaps[10][n].tobytes() for n, t in model.named_parameters())


def test_returned_epoch_is_argmax_of_curve():
    corpus, vocab = _setup(40)
    rng = np.random.default_rng(0)
    for _ in range(3):
        curve = rng.uniform(size=10).round(2).tolist()
        report = train(_tiny(), corpus, TrainConfig(lr=1e-3, patience=3, epochs=10), vocab,
                       dev_metric=_inject(curve, {}))
        seen = report.dev_curve
        assert report.best_epoch == 1 + int(np.argmax(seen))


def test_undefined_dev_kappa_is_never_an_improvement():
    corpus, vocab = _setup(40)
    report = train(_tiny(), corpus, TrainConfig(lr=1e-3, patience=2), vocab,
                   dev_metric=_inject([None, 0.3, None, None, 0.9], {}))
    assert report.best_epoch == 2 and report.stopped_epoch == 4
    assert "dev_qwk=undefined" in report.to_log()


def test_training_is_bit_deterministic():
    corpus, vocab = _setup(40)
    logs = []
    for _ in range(2):
        model = _tiny(seed=3)
        report = train(model, corpus, TrainConfig(lr=1e-2, epochs=3, seed=5), vocab)
        logs.append((report.to_log(), b"".join(t.data.tobytes() for t in model.parameters())))
    assert logs[0] == logs[1]


def test_class_range_mismatch_is_configuration_error():
    corpus, vocab = _setup(40)
    model = build_classifier(ModelConfig("ssm", vocab_size=40, n_classes=3, d_model=8), 0)
    with pytest.raises(ConfigurationError):
        train(model, corpus, TrainConfig(), vocab)


@pytest.mark.parametrize("arch", ["full-attention", "sliding-window", "segment-recurrent", "ssm"])
def test_overfit_one_sample_loss_decreases(arch):
    model = _tiny(arch, seed=1)
    ids = list(range(4, 24))
    cfg, state = TrainConfig(lr=1e-3, weight_decay=0.0), OptimState()
    losses = []
    for _ in range(6):
        model.zero_grad()
        with ag.Tape() as tape:
            loss = ag.cross_entropy(ag.stack([model(ids)]), [2])
            ag.backward(loss, tape)
        losses.append(loss.item())
        adamw_step(model.trainable(), state, cfg.lr, cfg)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------- evaluation


def _test_corpus():
    corpus = synthetic_corpus(10, 40, seed=6, min_words=10, max_words=30)
    return corpus, Vocab.from_corpus(corpus, min_count=1)


def test_echo_model_scores_kappa_one():
    corpus, vocab = _test_corpus()
    test = corpus.split("test")
    table, report = evaluate(EchoModel(test, vocab), test, vocab, "echo")
    assert report.overall == 1.0 and all(report.cell(g) == 1.0 for g in (6, 8, 10))
    assert [a for a, _ in table.pairs] == [r.score for r in test.records]


def test_constant_model_is_chance_and_degenerate_group_surfaced():
    corpus, vocab = _test_corpus()
    test = corpus.split("test")
    _, report = evaluate(ConstantModel(4, 1), test, vocab, "const")
    assert report.overall == 0.0
    # a grade whose essays all carry the constant's score is degenerate
    recs = [EssayRecord("x1", "a b", 2, 6, "test"), EssayRecord("x2", "c d", 2, 6, "test"),
            EssayRecord("x3", "e f", 1, 8, "test"), EssayRecord("x4", "g h", 3, 8, "test")]
    _, report = evaluate(ConstantModel(4, 1), Corpus(recs, (1, 4)), Vocab(), "const")
    assert report.cell(6) is None and 6 in report.undefined
