"""Noise schedule, DDIM sampling/inversion, the Gaussian oracle, and the toy
denoiser's training and serialization."""

import math

import numpy as np
import pytest
import torch

from polyclip.diffusion import (
    FEATURE_TAG,
    AnalyticGaussianDenoiser,
    EmptyDataset,
    FeatureMap,
    NoiseSchedule,
    NonPositiveVariance,
    ScheduleError,
    StepOrderViolation,
    ToyDenoiser,
    Trajectory,
    build_conditioning,
    cosine_schedule,
    ddim_invert,
    ddim_sample,
    ddim_step,
    derive_seed,
    downsample_mask,
    image_to_tensor,
    load_feature_dump,
    load_toy_denoiser,
    make_synthetic_dataset,
    null_conditioning,
    save_feature_dump,
    save_toy_denoiser,
    seeded_noise,
    tensor_to_image,
    train_toy_denoiser,
    PALETTE,
    BACKGROUND_COLOR,
)
from polyclip.encoder import NULL_TOKEN
from polyclip.pathclip import DimensionMismatch, PolygonMask, rasterize
from polyclip.polyfit import PsoConfig, fit_polygon


def oracle(T=50, mean=(1.3, -0.7, 0.9), var=(0.8, 1.2, 0.6)):
    sched = cosine_schedule(T)
    return (
        AnalyticGaussianDenoiser(
            torch.tensor(mean, dtype=torch.float64),
            torch.tensor(var, dtype=torch.float64),
            sched,
        ),
        sched,
    )


def posterior_mean_by_quadrature(xt, a, mu, var):
    """Independent check of E[x0 | xt]: dense-grid integration of the joint
    density x0 ~ N(mu, var), xt | x0 ~ N(sqrt(a) x0, 1 - a)."""
    sd0 = math.sqrt(var)
    sd_l = math.sqrt((1.0 - a) / a)
    anchor = xt / math.sqrt(a)
    lo = min(mu - 15 * sd0, anchor - 15 * sd_l)
    hi = max(mu + 15 * sd0, anchor + 15 * sd_l)
    grid = np.linspace(lo, hi, 400001)
    log_w = -((xt - math.sqrt(a) * grid) ** 2) / (2 * (1 - a)) - ((grid - mu) ** 2) / (
        2 * var
    )
    w = np.exp(log_w - log_w.max())
    return float((grid * w).sum() / w.sum())


# ---------------------------------------------------------------------------
# schedule


def test_cosine_schedule_shape_and_endpoints():
    sched = cosine_schedule(50)
    assert sched.alpha_bar.shape == (51,)
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[-1] == pytest.approx(5e-3)
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_cosine_schedule_rejects_bad_args():
    with pytest.raises(ScheduleError):
        cosine_schedule(0)
    with pytest.raises(ScheduleError):
        cosine_schedule(10, terminal=0.0)
    with pytest.raises(ScheduleError):
        cosine_schedule(10, terminal=1.5)


def test_noise_schedule_validation():
    with pytest.raises(ScheduleError):
        NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5]))  # wrong length
    with pytest.raises(ScheduleError):
        NoiseSchedule(T=2, alpha_bar=np.array([0.9, 0.5, 0.1]))  # [0] != 1
    with pytest.raises(ScheduleError):
        NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5, 0.5]))  # not strict
    with pytest.raises(ScheduleError):
        NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5, -0.1]))  # <= 0


def test_noise_schedule_array_is_frozen():
    sched = cosine_schedule(5)
    with pytest.raises(ValueError):
        sched.alpha_bar[1] = 0.9


# ---------------------------------------------------------------------------
# ddim steps


def test_ddim_step_order_checked():
    sched = cosine_schedule(10)
    x = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(StepOrderViolation):
        ddim_step(x, x, 3, 3, sched)
    with pytest.raises(StepOrderViolation):
        ddim_step(x, x, 2, 5, sched)
    with pytest.raises(StepOrderViolation):
        ddim_step(x, x, 5, -1, sched)
    with pytest.raises(StepOrderViolation):
        ddim_step(x, x, 11, 0, sched)


def test_ddim_step_zero_eps_is_pure_rescale():
    sched = cosine_schedule(10)
    x = seeded_noise((4,), 1)
    out = ddim_step(x, torch.zeros_like(x), 7, 3, sched)
    ratio = math.sqrt(sched.alpha_bar[3] / sched.alpha_bar[7])
    assert torch.allclose(out, ratio * x)


def test_ddim_step_to_t0_returns_x0_hat():
    sched = cosine_schedule(10)
    x = seeded_noise((4,), 2)
    eps = seeded_noise((4,), 3)
    out = ddim_step(x, eps, 5, 0, sched)
    a5 = sched.alpha_bar[5]
    x0_hat = (x - math.sqrt(1 - a5) * eps) / math.sqrt(a5)
    assert torch.allclose(out, x0_hat)


def test_ddim_step_has_exact_algebraic_inverse():
    # moving down with some eps and then re-applying the inverse move with the
    # same eps recovers the input to float64 round-off
    sched = cosine_schedule(20)
    x = seeded_noise((8,), 4)
    eps = seeded_noise((8,), 5)
    y = ddim_step(x, eps, 15, 9, sched)
    a_hi, a_lo = sched.alpha_bar[15], sched.alpha_bar[9]
    y0_hat = (y - math.sqrt(1 - a_lo) * eps) / math.sqrt(a_lo)
    x_back = math.sqrt(a_hi) * y0_hat + math.sqrt(1 - a_hi) * eps
    assert torch.allclose(x_back, x, atol=1e-12)


def test_iterated_steps_reach_data_mean():
    # narrow Gaussian data: the deterministic flow lands on the mean
    den, sched = oracle(T=100, mean=(2.5,), var=(1e-6,))
    x0, _ = ddim_sample(den, None, sched, seeded_noise((1,), 11))
    assert abs(float(x0[0]) - 2.5) <= 1e-2


# ---------------------------------------------------------------------------
# sampling and inversion


def test_ddim_sample_deterministic():
    den, sched = oracle()
    x_T = seeded_noise((3,), 21)
    a, _ = ddim_sample(den, None, sched, x_T)
    b, _ = ddim_sample(den, None, sched, x_T)
    assert torch.equal(a, b)


def test_sampling_trajectory_keys_decrease():
    den, sched = oracle(T=10)
    _, traj = ddim_sample(den, None, sched, seeded_noise((3,), 1), record_features=True)
    ts = [t for t, _, _ in traj.entries]
    assert ts == list(range(10, 0, -1))


def test_inversion_trajectory_keys_increase():
    den, sched = oracle(T=10)
    _, traj = ddim_invert(seeded_noise((3,), 2), den, None, sched)
    ts = [t for t, _, _ in traj.entries]
    assert ts == list(range(1, 11))


def test_invert_then_sample_round_trip():
    den, sched = oracle(T=50)
    x0 = torch.tensor([2.1, -1.9, 2.4], dtype=torch.float64)
    x_T, _ = ddim_invert(x0, den, None, sched)
    back, _ = ddim_sample(den, None, sched, x_T)
    rel = float((back - x0).norm() / x0.norm())
    assert rel <= 1e-2


def test_single_step_inversion_closed_form():
    # T = 1: eps at t=0 vanishes by the alpha_bar = 1 guard, so the inverse
    # is one corrected move computable by hand
    den, sched = oracle(T=1)
    x0 = torch.tensor([0.4, -1.2, 0.7], dtype=torch.float64)
    x_T, traj = ddim_invert(x0, den, None, sched)
    a1 = float(sched.alpha_bar[1])
    provisional = math.sqrt(a1) * x0
    eps1, _ = den.predict(provisional, 1, None)
    expected = math.sqrt(a1) * x0 + math.sqrt(1.0 - a1) * eps1
    assert torch.allclose(x_T, expected, atol=1e-15)
    assert len(traj) == 1 and traj.entries[0][0] == 1


# ---------------------------------------------------------------------------
# gaussian oracle denoiser


def test_oracle_rejects_nonpositive_variance():
    sched = cosine_schedule(10)
    with pytest.raises(NonPositiveVariance):
        AnalyticGaussianDenoiser(
            torch.zeros(2, dtype=torch.float64),
            torch.tensor([1.0, 0.0], dtype=torch.float64),
            sched,
        )


def test_oracle_eps_zero_at_t0():
    den, _ = oracle()
    eps, feats = den.predict(torch.tensor([5.0, -3.0, 1.0], dtype=torch.float64), 0, None)
    assert torch.all(eps == 0.0)
    assert feats is None


def test_oracle_point_mass_limit():
    den, sched = oracle(T=20, mean=(1.5, -0.5), var=(1e-15, 1e-15))
    t = 12
    a = float(sched.alpha_bar[t])
    x_t = torch.tensor([0.3, 2.0], dtype=torch.float64)
    post = den.posterior_mean(x_t, t)
    assert torch.allclose(post, torch.tensor([1.5, -0.5], dtype=torch.float64), atol=1e-9)
    eps, _ = den.predict(x_t, t, None)
    expected = (x_t - math.sqrt(a) * post) / math.sqrt(1 - a)
    assert torch.allclose(eps, expected)


@pytest.mark.parametrize("t", [10, 25, 45])
def test_oracle_posterior_mean_matches_quadrature(t):
    den, sched = oracle(T=50, mean=(0.8,), var=(1.7,))
    a = float(sched.alpha_bar[t])
    for xt in (-2.0, 0.3, 4.1):
        formula = float(den.posterior_mean(torch.tensor([xt], dtype=torch.float64), t)[0])
        numeric = posterior_mean_by_quadrature(xt, a, 0.8, 1.7)
        assert formula == pytest.approx(numeric, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# trajectories and feature dumps


def test_trajectory_direction_validation():
    with pytest.raises(ValueError):
        Trajectory("sideways")
    traj = Trajectory("sampling")
    x = torch.zeros(1, dtype=torch.float64)
    traj.append(5, x, None)
    with pytest.raises(StepOrderViolation):
        traj.append(5, x, None)
    inv = Trajectory("inversion")
    inv.append(1, x, None)
    with pytest.raises(StepOrderViolation):
        inv.append(1, x, None)


def test_feature_map_must_be_3d():
    with pytest.raises(DimensionMismatch):
        FeatureMap(values=torch.zeros((4, 4), dtype=torch.float64))


def test_feature_dump_round_trip(tmp_path):
    traj = Trajectory("sampling")
    gen = np.random.default_rng(6)
    grids = [gen.standard_normal((4, 4, 3)) for _ in range(5)]
    for i, g in enumerate(grids):
        traj.append(5 - i, torch.zeros(1, dtype=torch.float64), FeatureMap(values=torch.from_numpy(g)))
    path = tmp_path / "features.bin"
    save_feature_dump(traj, path)
    loaded = load_feature_dump(path)
    assert loaded.shape == (5, 4, 4, 3)
    # payload is float32 on disk
    assert np.allclose(loaded, np.stack(grids), atol=1e-6)


def test_feature_dump_errors(tmp_path):
    traj = Trajectory("sampling")
    traj.append(1, torch.zeros(1, dtype=torch.float64), None)
    with pytest.raises(ValueError):
        save_feature_dump(traj, tmp_path / "x.bin")
    p = tmp_path / "short.bin"
    p.write_bytes(b"\x01\x02")
    with pytest.raises(ValueError):
        load_feature_dump(p)
    q = tmp_path / "mismatch.bin"
    q.write_bytes(np.array([2, 2, 2, 2], dtype="<u4").tobytes() + b"\x00" * 8)
    with pytest.raises(ValueError):
        load_feature_dump(q)


# ---------------------------------------------------------------------------
# conversions and seeding


def test_image_tensor_round_trip():
    img = np.random.default_rng(7).random((8, 8, 3))
    back = tensor_to_image(image_to_tensor(img))
    assert np.allclose(back, img, atol=1e-12)


def test_tensor_to_image_clips():
    x = torch.tensor([[[3.0]], [[-3.0]], [[0.0]]], dtype=torch.float64)
    img = tensor_to_image(x)
    assert img[0, 0, 0] == 1.0
    assert img[0, 0, 1] == 0.0
    assert img[0, 0, 2] == 0.5


def test_derive_seed_distinct_streams():
    assert derive_seed(1, 0, 0) != derive_seed(1, 0, 1)
    assert derive_seed(1, 0, 0) != derive_seed(2, 0, 0)
    assert derive_seed(3, 4, 5) == derive_seed(3, 4, 5)


def test_seeded_noise_deterministic():
    assert torch.equal(seeded_noise((2, 3), 9), seeded_noise((2, 3), 9))
    assert not torch.equal(seeded_noise((2, 3), 9), seeded_noise((2, 3), 10))


def test_downsample_mask_threshold():
    cells = np.zeros((4, 4), dtype=np.uint8)
    cells[0:2, 0:2] = 1  # full block
    cells[0, 2] = 1  # quarter block
    cells[2:4, 0:2] = np.array([[1, 1], [0, 0]])  # half block -> foreground
    down = downsample_mask(PolygonMask.from_array(cells), 2, 2)
    assert down.cells.tolist() == [[1, 0], [1, 0]]
    with pytest.raises(DimensionMismatch):
        downsample_mask(PolygonMask.from_array(cells), 3, 3)


# ---------------------------------------------------------------------------
# synthetic dataset


def test_dataset_images_match_scene_masks():
    data = make_synthetic_dataset(10, seed=42)
    assert len(data) == 10
    for image, scene in data:
        union = np.zeros((32, 32), dtype=bool)
        for prim in scene.primitives:
            m = rasterize(prim, 32, 32).cells.astype(bool)
            color = PALETTE[prim.appearance.category]
            assert np.all(image[m] == np.array(color))
            assert not np.any(union & m)  # primitives never overlap
            union |= m
        assert np.all(image[~union] == np.array(BACKGROUND_COLOR))


def test_dataset_deterministic_and_validated():
    a = make_synthetic_dataset(3, seed=1)
    b = make_synthetic_dataset(3, seed=1)
    for (img_a, scene_a), (img_b, scene_b) in zip(a, b):
        assert np.array_equal(img_a, img_b)
        assert scene_a == scene_b
    with pytest.raises(ValueError):
        make_synthetic_dataset(0, seed=1)


def test_dataset_mask_recoverable_by_polygon_fit():
    image, scene = make_synthetic_dataset(1, seed=13)[0]
    prim = scene.primitives[0]
    mask = rasterize(prim, 32, 32)
    k = len(prim.path.clip_points)
    _, iou = fit_polygon(mask, PsoConfig(swarm_size=48, iterations=120, k=k, seed=3))
    assert iou >= 0.85


# ---------------------------------------------------------------------------
# toy denoiser


def small_model(seed=0):
    sched = cosine_schedule(10)
    return ToyDenoiser(sched, canvas=16, stem_channels=8, channels=16, seed=seed), sched


def test_toy_predict_shapes_and_tag():
    model, _ = small_model()
    x = seeded_noise((3, 16, 16), 1)
    eps, feats = model.predict(x, 5, None)
    assert eps.shape == x.shape
    assert feats.values.shape == (8, 8, 16)
    assert feats.tag == FEATURE_TAG


def test_toy_eps_zero_at_t0():
    model, _ = small_model()
    eps, _ = model.predict(seeded_noise((3, 16, 16), 2), 0, None)
    assert torch.all(eps == 0.0)


def test_toy_none_cond_equals_null_cond():
    model, _ = small_model()
    x = seeded_noise((3, 16, 16), 3)
    a, _ = model.predict(x, 4, None)
    b, _ = model.predict(x, 4, null_conditioning())
    assert torch.equal(a, b)


def test_toy_seeded_construction_deterministic():
    m1, _ = small_model(seed=7)
    m2, _ = small_model(seed=7)
    x = seeded_noise((3, 16, 16), 4)
    assert torch.equal(m1.predict(x, 3, None)[0], m2.predict(x, 3, None)[0])


def test_conditioning_construction():
    scene = make_synthetic_dataset(1, seed=2)[0][1]
    cond = build_conditioning(scene)
    assert len(cond.primitives) == len(scene.primitives)
    assert cond.use_masks
    for pc in cond.primitives:
        assert len(pc.tau) == 16
        assert all(0.0 <= v <= 1.0 for v in pc.tau)
        assert pc.mask.width == 32 and pc.mask.height == 32
    assert null_conditioning().global_tokens == (NULL_TOKEN,)
    assert null_conditioning().primitives == ()


def test_training_rejects_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_toy_denoiser([], epochs=1, seed=0)


def test_training_loss_decreases_and_counts_dropout():
    data = make_synthetic_dataset(16, seed=3, canvas=16)
    model = train_toy_denoiser(
        data, epochs=3, seed=1, schedule=cosine_schedule(10), channels=16
    )
    losses = model.train_stats["epoch_losses"]
    assert losses[-1] <= losses[0]
    assert model.train_stats["null_cond_count"] > 0
    assert model.train_stats["cond_count"] > 0


def test_training_dropout_extremes():
    data = make_synthetic_dataset(8, seed=4, canvas=16)
    always = train_toy_denoiser(
        data, epochs=1, seed=1, schedule=cosine_schedule(10), channels=16, caption_dropout=1.0
    )
    assert always.train_stats["cond_count"] == 0
    never = train_toy_denoiser(
        data, epochs=1, seed=1, schedule=cosine_schedule(10), channels=16, caption_dropout=0.0
    )
    assert never.train_stats["null_cond_count"] == 0


def test_toy_save_load_round_trip(tmp_path):
    data = make_synthetic_dataset(8, seed=5, canvas=16)
    model = train_toy_denoiser(
        data, epochs=1, seed=2, schedule=cosine_schedule(10), channels=16
    )
    path = tmp_path / "toy.pt"
    save_toy_denoiser(model, path)
    loaded = load_toy_denoiser(path)
    assert loaded.feature_scale == model.feature_scale
    x = seeded_noise((3, 16, 16), 6)
    scene = data[0][1]
    cond = build_conditioning(scene)
    eps_a, fa = model.predict(x, 4, cond)
    eps_b, fb = loaded.predict(x, 4, cond)
    assert torch.equal(eps_a, eps_b)
    assert torch.equal(fa.values, fb.values)
