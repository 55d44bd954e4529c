import numpy as np
import pytest
from scipy.stats import chisquare

from diamface.dataset import Domain, generate_synthetic
from diamface.imprinting import ImprintConfig
from diamface import training
from diamface.training import (
    OptimizerState,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    sgd_step,
    steps_per_epoch,
    train,
)

TINY = dict(batch_size=8, hidden=(6,), embedding_dim=4)


@pytest.fixture(scope="module")
def skewed():
    # identities with 1, 2, 5 and 9 selfies
    return generate_synthetic(4, [1, 2, 5, 9], d_in=3, domain_shift=0.3, noise=0.2, seed=0)


def test_domain_pairs_small_batch(skewed):
    idx = sample_batch(skewed, "domain-pairs", 4, np.random.default_rng(0))
    ids = skewed.identities[idx]
    assert len(set(ids.tolist())) == 2
    for c in set(ids.tolist()):
        doms = sorted(skewed.domains[idx][ids == c].tolist())
        assert doms == [Domain.DOC, Domain.LIVE]


def test_forced_pair():
    ds = generate_synthetic(2, 1, d_in=2, seed=0).subset([1])
    idx = sample_batch(ds, "domain-pairs", 2, np.random.default_rng(5))
    assert sorted(idx.tolist()) == [0, 1]


def test_sampler_errors(skewed):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_batch(skewed, "domain-pairs", 10, rng)
    with pytest.raises(ValueError):
        sample_batch(skewed, "pairs", 3, rng)
    with pytest.raises(ValueError):
        sample_batch(skewed, "triples", 2, rng)


def test_images_uniform_per_image(skewed):
    rng = np.random.default_rng(1)
    counts = np.zeros(len(skewed))
    for _ in range(50_000):
        counts[sample_batch(skewed, "images", 2, rng)] += 1
    assert chisquare(counts).pvalue > 0.01


def test_pairs_uniform_per_class(skewed):
    rng = np.random.default_rng(2)
    per_class = np.zeros(skewed.num_identities)
    per_image = np.zeros(len(skewed))
    for _ in range(30_000):
        idx = sample_batch(skewed, "pairs", 2, rng)
        per_class[skewed.identities[idx[0]]] += 1
        per_image[idx] += 1
    assert chisquare(per_class).pvalue > 0.01
    # images of the smallest class are drawn more often than those of the largest
    sizes = skewed.samples_per_identity()
    rate = [per_image[skewed.identities == c].mean() for c in range(4)]
    assert rate[int(np.argmin(sizes))] > 3 * rate[int(np.argmax(sizes))]


# ---------------------------------------------------------------- optimizer


def test_plain_gradient_descent(rng):
    theta = rng.standard_normal(5)
    g = rng.standard_normal(5)
    expected = theta - 0.1 * g
    sgd_step([theta], [g], OptimizerState((0.1,), (), momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(theta, expected, atol=1e-15)


def test_zero_gradient_fixed_point(rng):
    theta = rng.standard_normal(5)
    before = theta.copy()
    state = OptimizerState((0.1,), (), momentum=0.9, weight_decay=0.0)
    for step in range(10):
        sgd_step([theta], [np.zeros(5)], state, step)
    assert np.array_equal(theta, before)


def test_quadratic_bowl_converges(rng):
    theta = rng.standard_normal(4)
    state = OptimizerState((0.1,), (), momentum=0.9, weight_decay=0.0)
    for step in range(1000):
        sgd_step([theta], [theta.copy()], state, step)
    assert np.linalg.norm(theta) < 1e-6


def test_weight_decay_flags(rng):
    a, b = np.ones(3), np.ones(3)
    sgd_step([a, b], [np.zeros(3), np.zeros(3)], OptimizerState((1.0,), (), 0.0, 0.5), decay=[True, False])
    np.testing.assert_array_equal(a, 0.5)
    np.testing.assert_array_equal(b, 1.0)


def test_nonfinite_gradient_reports_step():
    with pytest.raises(TrainingError) as err:
        sgd_step([np.ones(2)], [np.array([1.0, np.nan])], OptimizerState(), step=17)
    assert err.value.step == 17


def test_lr_schedule():
    cfg = TrainConfig(steps=100, lr=0.01)
    opt = cfg.optimizer()
    assert opt.lr(0) == 0.01 and opt.lr(79) == 0.01
    assert opt.lr(80) == pytest.approx(0.001)


def test_epoch_length():
    assert steps_per_epoch(53591, 248) == 433
    assert steps_per_epoch(10, 4) == 5


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(20, 1, d_in=6, domain_shift=0.5, noise=0.1, seed=4)


def test_zero_steps_returns_initialization(small):
    cfg = TrainConfig(steps=0, **TINY)
    result = train(small, cfg)
    fresh, head = training.init_model(small, cfg)
    assert result.losses == []
    assert result.head.W_star.tobytes() == head.W_star.tobytes()
    for a, b in zip(result.pair.parameters(), fresh.parameters()):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"imprint": None},
        {"loss": "softmax", "imprint": None},
        {"loss": "contrastive", "imprint": None},
        {"loss": "triplet", "imprint": None},
        {"imprint": ImprintConfig(schedule="static-periodical", period=1), "sampler": "pairs"},
        {"sampler": "images", "sharing": "none"},
    ],
)
def test_same_seed_same_trace(small, overrides):
    cfg = TrainConfig(steps=30, seed=3, **TINY).with_updates(**overrides)
    a, b = train(small, cfg), train(small, cfg)
    assert np.array(a.losses).tobytes() == np.array(b.losses).tobytes()
    assert np.isfinite(a.losses).all()
    c = train(small, cfg.with_updates(seed=4))
    assert a.losses != c.losses


def test_all_shared_symmetric_siblings_identical():
    ds = generate_synthetic(10, 1, d_in=4, domain_shift=0.0, noise=0.1, seed=1)

    def check(step, result):
        for d, l in zip(result.pair.doc_net.layers, result.pair.live_net.layers):
            assert np.array_equal(d.weight, l.weight) and np.array_equal(d.bias, l.bias)

    train(ds, TrainConfig(steps=20, sharing="all", **TINY), on_step=check)


def test_head_rows_unit_norm_under_imprinting(small):
    def check(step, result):
        np.testing.assert_allclose(np.linalg.norm(result.head.W_star, axis=1), 1.0, atol=1e-12)

    train(small, TrainConfig(steps=15, **TINY), on_step=check)
    train(small, TrainConfig(steps=15, imprint=ImprintConfig(alpha=0.5), **TINY), on_step=check)


def test_dwi_head_gets_no_gradient_step(small, monkeypatch):
    # with alpha=0 the imprint is a no-op, so the head must be frozen entirely
    cfg = TrainConfig(steps=10, imprint=ImprintConfig(alpha=0.0), **TINY)
    _, head = training.init_model(small, cfg)
    result = train(small, cfg)
    assert result.head.W_star.tobytes() == head.W_star.tobytes()


def test_periodic_reimprint_count(small, monkeypatch):
    calls = []
    original = training.static_imprint_all
    monkeypatch.setattr(training, "static_imprint_all", lambda *a, **k: calls.append(1) or original(*a, **k))
    epoch = steps_per_epoch(small.num_identities, 8)
    train(small, TrainConfig(steps=3 * epoch, imprint=ImprintConfig(schedule="static-periodical", period=1), **TINY))
    assert len(calls) == 3
    calls.clear()
    train(small, TrainConfig(steps=3 * epoch, imprint=ImprintConfig(schedule="static-fixed"), **TINY))
    assert len(calls) == 1


def test_divergence_raises_with_trace(small):
    cfg = TrainConfig(steps=50, loss="softmax", imprint=None, lr=1e12, **TINY)
    with pytest.raises(TrainingError) as err, np.errstate(all="ignore"):
        train(small, cfg)
    assert len(err.value.trace) == err.value.step


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=7)
    with pytest.raises(ValueError):
        TrainConfig(loss="contrastive")  # imprinting needs the margin head
    with pytest.raises(ValueError):
        TrainConfig(sampler="random")
    cfg = TrainConfig(imprint=ImprintConfig(alpha=0.25), hidden=(3, 3))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.from_dict(cfg.with_updates(imprint=None).to_dict()).imprint is None


def test_trace_csv(small):
    text = train(small, TrainConfig(steps=3, **TINY)).trace_csv().splitlines()
    assert text[0] == "step,loss,s,lr"
    assert len(text) == 4


def test_diam_trace_eventually_decreasing():
    ds = generate_synthetic(200, 1, 16, 0.5, 0.1, seed=0)
    losses = np.array(train(ds, TrainConfig(steps=500, seed=0)).losses)
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")
    # rises below the round-off floor of the initial loss level are not counted
    assert np.all(np.diff(ma) <= 1e-9 * ma[0])
    assert ma[-1] < 0.1 * ma[0]


@pytest.mark.parametrize("overrides", [{}, {"loss": "softmax", "imprint": None}, {"loss": "triplet", "imprint": None}])
def test_checkpoint_round_trip(small, tmp_path, overrides):
    result = train(small.subset(range(3, 20)), TrainConfig(steps=5, **TINY).with_updates(**overrides))
    save_checkpoint(tmp_path / "m.ckpt", result, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["note"] == "x"
    assert back.config == result.config
    assert back.source_ids.tolist() == list(range(3, 20))
    probe = small.inputs[:4]
    doms = small.domains[:4]
    assert back.pair.embed(probe, doms).tobytes() == result.pair.embed(probe, doms).tobytes()
    save_checkpoint(tmp_path / "n.ckpt", back, {"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()
