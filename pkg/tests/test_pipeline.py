import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_config
from oracles import cross_entropy
from imrseg.embeddings import ToyProvider
from imrseg.errors import ConfigError, TrainingError
from imrseg.mask_init import MaskEstimate
from imrseg.pipeline import (
    PipelineConfig, RefinementTrajectory, aggregate_k_shot, build_model, compute_lambda, loss_all,
    predict_k_shot, predict_query, predict_zero_shot, refine_step, run_refinement,
)
from imrseg.training import RecordCache, load_model, save_model, train


@pytest.mark.parametrize("t,n,schedule,expected", [
    (2, 3, "linear", 2 / 3), (1, 3, "none", 0.0), (3, 3, "none", 1.0), (1, 4, "same", 1.0),
    (4, 4, "linear", 1.0),
])
def test_compute_lambda(t, n, schedule, expected):
    assert compute_lambda(t, n, schedule) == expected


def test_compute_lambda_errors():
    with pytest.raises(ConfigError):
        compute_lambda(0, 3, "same")
    with pytest.raises(ConfigError):
        compute_lambda(1, 3, "cubic")


def _uniform_traj(n, size=(1, 1, 1)):
    half = MaskEstimate(soft=torch.full(size, 0.5, dtype=torch.float64))
    return RefinementTrajectory(support=[half] * (n + 1), query=[half] * (n + 1))


def test_uniform_prediction_loss_is_two_ln2():
    cfg = PipelineConfig(lambda_schedule="linear")
    gt = torch.ones(1, 1, 1, dtype=torch.bool)
    loss = loss_all(_uniform_traj(1), gt, gt, cfg)
    assert float(loss) == pytest.approx(2 * math.log(2), abs=1e-12)


def _random_traj(n, seed, shape=(2, 5, 5)):
    g = torch.Generator().manual_seed(seed)
    est = lambda: MaskEstimate(soft=None, logits=torch.randn(shape[0], 2, *shape[1:], generator=g,
                                                               dtype=torch.float64))
    sup, qry = [MaskEstimate(soft=torch.rand(shape, generator=g, dtype=torch.float64))], []
    qry.append(MaskEstimate(soft=torch.rand(shape, generator=g, dtype=torch.float64)))
    for _ in range(n):
        a, b = est(), est()
        a.soft, b.soft = torch.softmax(a.logits, 1)[:, 1], torch.softmax(b.logits, 1)[:, 1]
        sup.append(a)
        qry.append(b)
    return RefinementTrajectory(support=sup, query=qry)


@pytest.mark.parametrize("schedule", ["none", "linear", "same"])
def test_loss_term_by_term(schedule):
    n, w_s = 3, 0.7
    traj = _random_traj(n, 1)
    g = torch.Generator().manual_seed(2)
    gt_s = torch.rand(2, 5, 5, generator=g) > 0.5
    gt_q = torch.rand(2, 5, 5, generator=g) > 0.5
    cfg = PipelineConfig(lambda_schedule=schedule, w_s=w_s)
    expected = 0.0
    for t in range(1, n + 1):
        lam = {"none": float(t == n), "linear": t / n, "same": 1.0}[schedule]
        expected += lam * (cross_entropy(traj.query[t].soft.numpy(), gt_q.numpy())
                           + w_s * cross_entropy(traj.support[t].soft.numpy(), gt_s.numpy()))
    assert float(loss_all(traj, gt_s, gt_q, cfg)) == pytest.approx(expected, abs=1e-10)


def test_loss_none_ignores_intermediate_steps():
    traj = _random_traj(3, 4)
    gt = torch.ones(2, 5, 5, dtype=torch.bool)
    cfg = PipelineConfig(lambda_schedule="none")
    before = float(loss_all(traj, gt, gt, cfg))
    traj.query[1].logits = traj.query[1].logits + 5.0 * torch.randn_like(traj.query[1].logits)
    traj.support[2].logits = -traj.support[2].logits
    assert float(loss_all(traj, gt, gt, cfg)) == before


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["none", "linear", "same"]))
def test_loss_non_negative(seed, schedule):
    traj = _random_traj(2, seed)
    gt = torch.rand(2, 5, 5, generator=torch.Generator().manual_seed(seed)) > 0.3
    assert float(loss_all(traj, gt, gt, PipelineConfig(lambda_schedule=schedule))) >= 0


def test_aggregate_five_shot_vote():
    masks = [np.array([[1, 1]]), np.array([[1, 1]]), np.array([[1, 1]]), np.array([[0, 1]]),
             np.array([[0, 1]])]
    soft = aggregate_k_shot(masks).soft
    assert soft[0, 0] == pytest.approx(0.6, abs=0)
    assert soft[0, 1] == 1.0


def test_aggregate_empty_votes():
    soft = aggregate_k_shot([np.zeros((2, 2))] * 3).soft
    assert torch.all(soft == 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(np.int8, (3, 3), elements=st.integers(0, 1)), min_size=1, max_size=6),
       st.randoms())
def test_aggregate_properties(masks, rnd):
    soft = aggregate_k_shot(masks).soft
    assert soft.min() >= 0 and soft.max() <= 1
    if sum(m.sum() for m in masks) > 0:
        assert (soft == 1).any()
    shuffled = list(masks)
    rnd.shuffle(shuffled)
    assert torch.equal(aggregate_k_shot(shuffled).soft, soft)


def test_config_round_trip_and_validation():
    cfg = tiny_config(steps=3, lambda_schedule="linear")
    again = PipelineConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stepz": 3})
    with pytest.raises(ConfigError):
        PipelineConfig(update_schedule="alternating", cell_variant="group_conv")
    with pytest.raises(ConfigError):
        PipelineConfig(steps=0)


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(tiny_config(steps=3)).double()


def _inputs(seed=0, b=1, size=32):
    g = torch.Generator().manual_seed(seed)
    imgs = [torch.rand(b, 3, size, size, generator=g, dtype=torch.float64) for _ in range(2)]
    masks = [torch.rand(b, size, size, generator=g, dtype=torch.float64) for _ in range(2)]
    return imgs, masks


def test_refine_step_role_symmetry(tiny_model):
    (img_s, img_q), (m_s, m_q) = _inputs()
    pyr_s, pyr_q = tiny_model.features(img_s), tiny_model.features(img_q)
    h = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    h2 = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        es, eq, hs, hq = refine_step(tiny_model, pyr_s, pyr_q, m_s, m_q, h, h2)
        es2, eq2, hs2, hq2 = refine_step(tiny_model, pyr_q, pyr_s, m_q, m_s, h2, h)
    assert torch.equal(es.soft, eq2.soft) and torch.equal(eq.soft, es2.soft)
    assert torch.equal(hs, hq2) and torch.equal(hq, hs2)


def test_trajectory_length_and_range(tiny_model):
    (img_s, img_q), (m_s, m_q) = _inputs(1)
    with torch.no_grad():
        traj = run_refinement(tiny_model, tiny_model.features(img_s), tiny_model.features(img_q), m_s, m_q)
    assert len(traj) == 4 and len(traj.support) == 4
    assert torch.equal(traj.query[0].soft, m_q)
    for est in traj.query + traj.support:
        assert est.soft.min() >= 0 and est.soft.max() <= 1


def test_alternating_dataflow():
    model = build_model(tiny_config(steps=2, cell_variant="none", update_schedule="alternating")).double()
    (img_s, img_q), (m_s, m_q) = _inputs(2)
    pyr_s, pyr_q = model.features(img_s), model.features(img_q)
    with torch.no_grad():
        traj = run_refinement(model, pyr_s, pyr_q, m_s, m_q)
        q1 = model.head(*_branch_corr_h(model, pyr_q, pyr_s, m_s), m_q)
    # t = 1 updates the query from the support; the support estimate carries over
    assert torch.equal(traj.query[1].logits, q1)
    assert traj.support[1] is traj.support[0]
    # t = 2 updates the support from the refined query
    assert traj.query[2] is traj.query[1]
    assert not torch.equal(traj.support[2].soft, traj.support[1].soft)


def _branch_corr_h(model, pyr_a, pyr_b, mask_b):
    from imrseg.correlation import correlate
    corr = correlate(model.neck, pyr_a, pyr_b, mask_b)
    return corr, torch.zeros_like(corr)


def _images(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=(32, 32, 3)).astype(np.float32) for _ in range(2)]


def test_predict_single_step_equals_refine_step():
    cfg = tiny_config(steps=1)
    model = build_model(cfg)
    provider = ToyProvider()
    sup, qry = _images(3)
    mask, traj = predict_query(model, provider, sup, qry, "circle")
    from imrseg.pipeline import soft_initial_mask
    m_s = soft_initial_mask(provider, sup, "circle", cfg)[None]
    m_q = soft_initial_mask(provider, qry, "circle", cfg)[None]
    with torch.no_grad():
        _, eq, _, _ = refine_step(model, model.features(torch.as_tensor(sup)[None]),
                                  model.features(torch.as_tensor(qry)[None]), m_s, m_q, None, None)
    assert torch.equal(traj.query[1].soft, eq.soft)
    assert torch.equal(mask, eq.soft[0] >= 0.5)


def test_mode_consistency():
    model = build_model(tiny_config(steps=2))
    provider = ToyProvider()
    img, other = _images(4)
    zero, _ = predict_zero_shot(model, provider, img, "star")
    few, _ = predict_query(model, provider, img, img, "star")
    assert torch.equal(zero, few)
    one, _ = predict_query(model, provider, other, img, "star")
    five, trajs = predict_k_shot(model, provider, [other] * 5, img, "star")
    assert len(trajs) == 5
    assert torch.equal(five, one)


def test_prediction_deterministic():
    provider = ToyProvider()
    sup, qry = _images(5)
    a = predict_query(build_model(tiny_config()), provider, sup, qry, "ring")[1]
    b = predict_query(build_model(tiny_config()), provider, sup, qry, "ring")[1]
    for x, y in zip(a.query, b.query):
        assert torch.equal(x.soft, y.soft)


def test_training_reduces_loss(tiny_index):
    cfg = tiny_config(steps=2, episodes=240, batch_size=4, lr=2e-3)
    _, log = train(tiny_index, cfg)
    first = np.mean([r["loss"] for r in log[:10]])
    last = np.mean([r["loss"] for r in log[-10:]])
    assert last < first
    assert {"step", "loss", "terms", "seed", "episodes"} <= set(log[0])


def test_non_finite_loss_names_episodes(tiny_index):
    cfg = tiny_config(episodes=12, batch_size=2)
    model = build_model(cfg)
    with torch.no_grad():
        model.head.fuse2.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="episodes"):
        train(tiny_index, cfg, model=model)
    with pytest.raises(ConfigError):
        tiny_config(lr=float("nan"))


def test_checkpoint_round_trip(tmp_path, tiny_index):
    cfg = tiny_config(episodes=8, batch_size=2)
    model, _ = train(tiny_index, cfg)
    save_model(model, tmp_path / "ckpt")
    loaded, index = load_model(tmp_path / "ckpt")
    assert index["config"] == cfg.to_dict()
    provider = ToyProvider()
    sup, qry = _images(6)
    a = predict_query(model, provider, sup, qry, "cross")[1]
    b = predict_query(loaded, provider, sup, qry, "cross")[1]
    assert torch.allclose(a.query[-1].soft, b.query[-1].soft, atol=0)


def test_hue_rotation_preserves_grey_and_is_invertible():
    from imrseg.training import rotate_hue
    grey = torch.full((1, 3, 2, 2), 0.4, dtype=torch.float64)
    assert torch.allclose(rotate_hue(grey, [1.3]), grey, atol=1e-12)
    img = 0.25 + 0.5 * torch.rand(1, 3, 4, 4, dtype=torch.float64)
    back = rotate_hue(rotate_hue(img, [0.7]), [-0.7])
    assert torch.allclose(back, img, atol=1e-12)


def test_record_cache_reuses_entries(tiny_index):
    model = build_model(tiny_config())
    cache = RecordCache(model, ToyProvider(), model.config)
    rec = tiny_index.all_records()[0]
    assert cache.get(rec) is cache.get(rec)
