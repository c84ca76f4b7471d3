"""Training recipe: loss oracles, Adam reference recurrence, patch/augment
statistics, loop reproducibility, gradient-check machinery."""
import numpy as np
import pytest

from llfusion.datasets import load_manifest
from llfusion.errors import NonFiniteGradient
from llfusion.model import ModelConfig
from llfusion.model.checkpoint import AdamState, load_checkpoint
from llfusion.model.engine import ParameterStore, Tensor
from llfusion.training import (TrainConfig, adam_step, augment, check_gradients,
                               draw_batch, gradient_check, mae_loss,
                               read_metrics_log, sample_patch, train,
                               _mae_graph, _rand_window, _RowBank)

RNG = np.random.default_rng(31)


# ---------------------------------------------------------------------------
# mae
# ---------------------------------------------------------------------------

def test_mae_identity_and_offset():
    a = RNG.uniform(0, 1, (6, 6, 3))
    assert mae_loss(a, a) == 0.0
    assert mae_loss(a + 0.1, a) == pytest.approx(0.1, abs=1e-12)


def test_mae_matches_loop():
    a = RNG.uniform(0, 1, (2, 2, 3))
    b = RNG.uniform(0, 1, (2, 2, 3))
    acc = 0.0
    for i in range(2):
        for j in range(2):
            for c in range(3):
                acc += abs(a[i, j, c] - b[i, j, c])
    assert mae_loss(a, b) == pytest.approx(acc / 12, abs=1e-15)


def test_mae_shape_mismatch():
    from llfusion.errors import ShapeError
    with pytest.raises(ShapeError):
        mae_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_masked_mae_graph_matches_manual():
    pred = RNG.uniform(0, 1, (1, 4, 4, 3))
    gt = RNG.uniform(0, 1, (1, 4, 4, 3))
    mask = (RNG.uniform(0, 1, (1, 4, 4, 1)) > 0.4).astype(np.float64)
    loss = _mae_graph(Tensor(pred), gt, mask).data
    manual = np.sum(np.abs(pred - gt) * mask) / (mask.sum() * 3)
    assert loss == pytest.approx(manual, abs=1e-15)
    # all-ones mask reduces to the plain mean bit-for-bit
    ones = np.ones_like(mask)
    assert _mae_graph(Tensor(pred), gt, ones).data == _mae_graph(Tensor(pred), gt, None).data


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def _scalar_store(value):
    s = ParameterStore()
    s.add("theta", np.array([value]))
    return s


def test_adam_zero_gradient_is_noop():
    s = _scalar_store(1.5)
    s["theta"].grad = np.zeros(1)
    state = AdamState.zeros_like(s)
    adam_step(s, state, TrainConfig())
    assert s["theta"].data[0] == 1.5
    assert state.t == 1
    assert np.all(state.m["theta"] == 0) and np.all(state.v["theta"] == 0)


def test_adam_single_step_hand_recurrence():
    # g=1, t=1: m_hat = v_hat = 1 -> update = -lr / (1 + eps)
    s = _scalar_store(0.0)
    s["theta"].grad = np.ones(1)
    cfg = TrainConfig()
    adam_step(s, AdamState.zeros_like(s), cfg)
    expect = -cfg.learning_rate / (1.0 + cfg.adam_eps)
    assert s["theta"].data[0] == pytest.approx(expect, rel=1e-12)
    assert abs(s["theta"].data[0] + 2e-4) < 1e-8


def test_adam_two_steps_match_reference_recurrence():
    # independent scalar recurrence, written out long-hand
    cfg = TrainConfig(learning_rate=3e-3)
    s = _scalar_store(0.7)
    state = AdamState.zeros_like(s)
    gs = [0.4, -1.2]
    theta, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate(gs, start=1):
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        mh = m / (1 - cfg.adam_beta1**t)
        vh = v / (1 - cfg.adam_beta2**t)
        theta -= cfg.learning_rate * mh / (np.sqrt(vh) + cfg.adam_eps)
        s["theta"].grad = np.array([g])
        adam_step(s, state, cfg)
    assert s["theta"].data[0] == pytest.approx(theta, abs=1e-12)


def test_adam_loss_scale_invariance_of_first_step_direction():
    cfg = TrainConfig()
    g = RNG.standard_normal(5)
    outs = []
    for c in (1.0, 10.0):
        s = ParameterStore()
        s.add("w", np.zeros(5))
        s["w"].grad = c * g
        st = AdamState.zeros_like(s)
        adam_step(s, st, cfg)
        assert np.allclose(st.m["w"], c * 0.1 * g, atol=1e-15)
        assert np.allclose(st.v["w"], c * c * 1e-3 * g * g, atol=1e-15)
        outs.append(s["w"].data.copy())
    assert np.array_equal(np.sign(outs[0]), np.sign(outs[1]))


def test_adam_nonfinite_gradient_names_parameter():
    s = _scalar_store(0.0)
    s["theta"].grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradient, match="theta"):
        adam_step(s, AdamState.zeros_like(s), TrainConfig())


def test_adam_missing_gradient_rejected():
    s = _scalar_store(0.0)
    with pytest.raises(ValueError, match="not populated"):
        adam_step(s, AdamState.zeros_like(s), TrainConfig())


# ---------------------------------------------------------------------------
# patches and augmentation
# ---------------------------------------------------------------------------

def _triple(h=40, w=40):
    return (RNG.uniform(0, 1, (h, w, 3)), RNG.uniform(0, 1, (h, w, 1)),
            RNG.uniform(0, 1, (h, w, 3)))


def test_sample_patch_full_size_window():
    triple = _triple(24, 24)
    crops = sample_patch(triple, 24, np.random.default_rng(0))
    for c, orig in zip(crops, triple):
        assert np.array_equal(c, orig)


def test_sample_patch_same_window_and_determinism():
    triple = _triple()
    a = sample_patch(triple, 16, np.random.default_rng(5))
    b = sample_patch(triple, 16, np.random.default_rng(5))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    # the same window applies to all three: verify via coordinate markers
    h = w = 40
    marker = np.mgrid[0:h, 0:w][0][:, :, None].astype(np.float64)
    crops = sample_patch((marker, marker.copy(), marker.copy()), 16,
                         np.random.default_rng(9))
    assert np.array_equal(crops[0], crops[1])
    assert np.array_equal(crops[0], crops[2])


def test_sample_patch_too_small_errors():
    with pytest.raises(ValueError, match="patch"):
        sample_patch(_triple(12, 12), 16, np.random.default_rng(0))


def test_offset_histogram_uniform():
    rng = np.random.default_rng(1)  # frozen seed: all 2x129 bins inside 3 sigma
    n, bins = 10_000, 129  # 256 - 128 + 1 valid offsets
    counts_y = np.zeros(bins)
    counts_x = np.zeros(bins)
    for _ in range(n):
        oy, ox = _rand_window(256, 256, 128, rng)
        counts_y[oy] += 1
        counts_x[ox] += 1
    p = 1.0 / bins
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts_y - n * p) <= 3 * sigma)
    assert np.all(np.abs(counts_x - n * p) <= 3 * sigma)


def test_augment_identity_and_involution():
    triple = tuple(np.ascontiguousarray(x) for x in _triple(16, 16))

    class FixedRng:
        def __init__(self, value):
            self.value = value

        def integers(self, lo, hi):
            return self.value

    out = augment(triple, FixedRng(0))  # identity transform
    for a, b in zip(out, triple):
        assert np.array_equal(a, b)

    once = augment(triple, FixedRng(2))   # 180 degrees
    twice = augment(once, FixedRng(2))
    for a, b in zip(twice, triple):
        assert np.array_equal(a, b)


def test_augment_marker_lands_identically():
    rng = np.random.default_rng(77)
    for _ in range(16):
        rgb = np.zeros((8, 8, 3))
        th = np.zeros((8, 8, 1))
        ref = np.zeros((8, 8, 3))
        rgb[2, 5] = th[2, 5] = ref[2, 5] = 1.0
        state = np.random.default_rng(rng.integers(1 << 30))
        a, b, c = augment((rgb, th, ref), state)
        pos_a = np.argwhere(a[:, :, 0] == 1.0)
        pos_b = np.argwhere(b[:, :, 0] == 1.0)
        pos_c = np.argwhere(c[:, :, 0] == 1.0)
        assert np.array_equal(pos_a, pos_b) and np.array_equal(pos_a, pos_c)


def test_augment_covers_all_eight_transforms():
    rng = np.random.default_rng(3)
    base = RNG.uniform(0, 1, (8, 8, 3))
    seen = set()
    for _ in range(200):
        out, _, _ = augment((base, base.copy(), base.copy()), rng)
        seen.add(out.tobytes())
    assert len(seen) == 8


def test_augment_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        augment(_triple(8, 10), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _fast_cfgs(iters, seed=0, patch=16, mode="cross_attention"):
    mcfg = ModelConfig(base_channels=8, heads=2, fused_channels=8, ffn_expansion=2)
    tcfg = TrainConfig(patch=patch, iterations=iters, seed=seed, ablation_mode=mode,
                       checkpoint_every=500)
    return mcfg, tcfg


def test_train_zero_iterations_writes_init_checkpoint(tmp_path, pair_fixture):
    manifest = load_manifest(pair_fixture)
    mcfg, tcfg = _fast_cfgs(0)
    ckpt = train(manifest, mcfg, tcfg, tmp_path / "run0")
    ck = load_checkpoint(ckpt)
    assert ck.iteration == 0 and ck.adam.t == 0
    from llfusion.model.network import init_param_store
    fresh = init_param_store(mcfg, "cross_attention", np.random.default_rng([0, 0]))
    for n, p in fresh.items():
        assert np.array_equal(ck.params[n].data, p.data)
    assert (tmp_path / "run0" / "metrics.log").read_text() == ""


def test_train_reproducible_bit_exact(tmp_path, pair_fixture):
    manifest = load_manifest(pair_fixture)
    mcfg, tcfg = _fast_cfgs(5, seed=9)
    c1 = train(manifest, mcfg, tcfg, tmp_path / "a")
    c2 = train(manifest, mcfg, tcfg, tmp_path / "b")
    assert c1.read_bytes() == c2.read_bytes()
    assert ((tmp_path / "a" / "metrics.log").read_text()
            == (tmp_path / "b" / "metrics.log").read_text())


def test_train_seed_changes_outcome(tmp_path, pair_fixture):
    manifest = load_manifest(pair_fixture)
    mcfg, t1 = _fast_cfgs(3, seed=1)
    _, t2 = _fast_cfgs(3, seed=2)
    c1 = train(manifest, mcfg, t1, tmp_path / "a")
    c2 = train(manifest, mcfg, t2, tmp_path / "b")
    assert c1.read_bytes() != c2.read_bytes()


def test_step_zero_loss_is_mae_of_lit_rgb(tmp_path, pair_fixture):
    """Zero-init residual head: the first logged loss equals the MAE between
    rgb*M and gt for the same batch, reconstructed from the same data stream."""
    manifest = load_manifest(pair_fixture)
    mcfg, tcfg = _fast_cfgs(1, seed=4, patch=24)
    train(manifest, mcfg, tcfg, tmp_path / "run")
    logged = read_metrics_log(tmp_path / "run" / "metrics.log")[0][1]

    from llfusion.model.engine import Tensor
    from llfusion.model.network import FusionNet, illumination_estimator
    from llfusion.training import PCA_CALIBRATION_PATCHES, _CALIB_CHUNK

    bank = _RowBank(manifest)
    model = FusionNet(mcfg, "cross_attention", seed=tcfg.seed)
    data_rng = np.random.default_rng([tcfg.seed, 1])
    done = 0
    while done < PCA_CALIBRATION_PATCHES:  # replay the calibration draws
        n = min(_CALIB_CHUNK, PCA_CALIBRATION_PATCHES - done)
        draw_batch(bank, tcfg.patch, n, data_rng, augment_patches=False)
        done += n
    rgb_b, _, gt_b, _ = draw_batch(bank, tcfg.patch, tcfg.batch_size, data_rng)
    _, m = illumination_estimator(Tensor(rgb_b), model.params, "est_rgb")
    expect = mae_loss(rgb_b * m.data, gt_b)
    assert abs(logged - expect) < 1e-12


def test_train_metrics_log_format(tmp_path, pair_fixture):
    manifest = load_manifest(pair_fixture)
    mcfg, tcfg = _fast_cfgs(3)
    train(manifest, mcfg, tcfg, tmp_path / "run")
    lines = (tmp_path / "run" / "metrics.log").read_text().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines, start=1):
        parts = line.split()
        assert parts[0] == "step" and int(parts[1]) == i
        assert parts[2] == "loss" and float(parts[3]) >= 0
        assert parts[4] == "lr" and float(parts[5]) == tcfg.learning_rate


def test_row_bank_requires_rows():
    from llfusion.datasets import Manifest
    with pytest.raises(ValueError, match="empty"):
        _RowBank(Manifest(rows=[], split="train"))


# ---------------------------------------------------------------------------
# gradient checker
# ---------------------------------------------------------------------------

def test_check_gradients_empty_store_passes():
    store = ParameterStore()
    report = check_gradients(store, lambda: _mae_graph(
        Tensor(np.zeros((1, 2, 2, 3))), np.ones((1, 2, 2, 3)), None))
    assert report.rows == [] and report.passed


def test_gradient_check_flags_corrupted_block(tiny_cfg):
    def corrupt(params):
        params["self_rgb0.q.w"].grad = params["self_rgb0.q.w"].grad + 1.0

    report = gradient_check(tiny_cfg, probes_per_tensor=4, exhaustive_limit=4,
                            tamper=corrupt)
    assert not report.passed
    bad = {r.name for r in report.rows if not r.passed}
    assert "self_rgb0.q.w" in bad
    clean = {r.name for r in report.rows if r.passed}
    assert "cross.q.w" in clean


def test_gradient_check_row_per_parameter(tiny_cfg):
    from llfusion.model.network import parameter_shapes
    report = gradient_check(tiny_cfg, probes_per_tensor=2, exhaustive_limit=2)
    assert len(report.rows) == len(parameter_shapes(tiny_cfg, "cross_attention"))
    assert report.passed, report.format()
    assert "overall: PASS" in report.format()
