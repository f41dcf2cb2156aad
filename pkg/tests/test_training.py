"""Loss pieces, dynamic weighting, the training loop, and checkpoints."""

import json

import numpy as np
import pytest

from metricforge.dataset import SplitSpec, content_isolated_split, normalize_scores
from metricforge.encoder import EncoderConfig
from metricforge.errors import (
    BatchTooLarge,
    ChecksumMismatch,
    CorruptCheckpoint,
    EmptyManifest,
    EmptySelection,
    InvalidConfig,
    LengthMismatch,
    NonPositiveLoss,
    VersionMismatch,
)
from metricforge.evaluation import predict_manifest
from metricforge.pipeline import flat_params
from metricforge.synthetic import make_synthetic_manifest
from metricforge.training import (
    Adam,
    Checkpoint,
    HYPERPARAM_PRESETS,
    HyperParams,
    LossWeights,
    TaskSelector,
    dynamic_weight_update,
    fit,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    second_training,
    weighted_total_loss,
    write_history_csv,
)

DESK_CFG = EncoderConfig(d=12, L=12, pre_encoder_heads=3, layers=1, seed=0, d_in=8)


def desk_manifest(seed=5, groups=8, per_group=4, metrics=("quality", "alignment", "authenticity")):
    return normalize_scores(make_synthetic_manifest(
        n_groups=groups, per_group=per_group, d_in=8, image_tokens=4,
        seed=seed, label_gain=2.0, metric_names=metrics))


def desk_hp(**overrides):
    base = dict(epochs=120, batch_size=16, learning_rate=1e-2, seed=42)
    base.update(overrides)
    return HyperParams(**base)


# --- mse_loss ------------------------------------------------------------------

def test_mse_zero_when_equal():
    pred = np.array([[0.2, 0.4], [0.6, 0.8]])
    total, per_metric = mse_loss(pred, pred.copy())
    assert total == 0.0
    assert np.all(per_metric == 0.0)


def test_mse_half_residual_single_sample():
    total, per_metric = mse_loss(np.array([[0.5]]), np.array([[0.0]]))
    assert per_metric[0] == pytest.approx(0.25, abs=1e-15)
    assert total == pytest.approx(0.25, abs=1e-15)


def test_mse_matches_definitional_oracle():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(7, 3))
    target = rng.normal(size=(7, 3))
    _, per_metric = mse_loss(pred, target)
    for j in range(3):
        want = sum((pred[i, j] - target[i, j]) ** 2 for i in range(7)) / 7
        assert per_metric[j] == pytest.approx(want, rel=1e-12)


def test_mse_selector_restricts_total():
    pred = np.array([[1.0, 0.0, 0.0]])
    target = np.zeros((1, 3))
    names = ("quality", "alignment", "authenticity")
    total, _ = mse_loss(pred, target, TaskSelector(("alignment",)), names)
    assert total == 0.0
    total, _ = mse_loss(pred, target, TaskSelector(("quality",)), names)
    assert total == 1.0


def test_mse_empty_selection_rejected():
    with pytest.raises(EmptySelection):
        TaskSelector(())


def test_mse_shape_mismatch():
    with pytest.raises(LengthMismatch):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


# --- dynamic weighting -----------------------------------------------------------

def test_dynamic_update_hand_case_exact():
    out = dynamic_weight_update(LossWeights(np.array([0.5, 0.5])),
                                np.array([1.0, 3.0]))
    assert out.alpha[0] == 0.25
    assert out.alpha[1] == 0.75


def test_dynamic_update_equal_losses_fixed_point():
    alpha = LossWeights(np.array([0.2, 0.3, 0.5]))
    out = dynamic_weight_update(alpha, np.array([2.0, 2.0, 2.0]))
    np.testing.assert_allclose(out.alpha, alpha.alpha, atol=1e-15)


def test_dynamic_update_absorbing_mass():
    out = dynamic_weight_update(LossWeights(np.array([1.0, 0.0])),
                                np.array([5.0, 7.0]))
    np.testing.assert_array_equal(out.alpha, [1.0, 0.0])


def test_dynamic_update_simplex_property():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 6))
        u = rng.uniform(0.01, 1.0, size=n)
        alpha = LossWeights(u / u.sum())
        losses = rng.uniform(1e-3, 10.0, size=n)
        out = dynamic_weight_update(alpha, losses)
        assert abs(out.alpha.sum() - 1.0) <= 1e-9
        assert np.all(out.alpha >= 0.0)


def test_dynamic_update_monotone_reweighting():
    rng = np.random.default_rng(2)
    for _ in range(100):
        shared = float(rng.uniform(0.1, 0.5))
        rest = float(1.0 - 2 * shared)
        alpha = LossWeights(np.array([shared, shared, rest]))
        lo = float(rng.uniform(0.1, 5.0))
        hi = lo + float(rng.uniform(0.01, 5.0))
        out = dynamic_weight_update(alpha, np.array([hi, lo, 1.0]))
        assert out.alpha[0] > out.alpha[1]


def test_dynamic_update_rejects_nonpositive_losses():
    with pytest.raises(NonPositiveLoss):
        dynamic_weight_update(LossWeights(np.array([0.5, 0.5])), np.array([1.0, 0.0]))


def test_dynamic_update_length_mismatch():
    with pytest.raises(LengthMismatch):
        dynamic_weight_update(LossWeights(np.array([0.5, 0.5])), np.ones(3))


def test_loss_weights_validation():
    with pytest.raises(InvalidConfig):
        LossWeights(np.array([0.7, 0.7]))
    with pytest.raises(InvalidConfig):
        LossWeights(np.array([-0.1, 1.1]))


# --- weighted total ---------------------------------------------------------------

def test_weighted_total_one_hot():
    w = LossWeights(np.array([0.0, 1.0, 0.0]))
    assert weighted_total_loss(np.array([3.0, 6.0, 9.0]), w) == 6.0


def test_weighted_total_uniform():
    w = LossWeights(np.full(3, 1.0 / 3.0))
    assert weighted_total_loss(np.array([3.0, 6.0, 9.0]), w) == pytest.approx(6.0, abs=1e-12)


def test_weighted_total_matches_dot_oracle():
    rng = np.random.default_rng(3)
    u = rng.uniform(0.1, 1.0, size=4)
    w = LossWeights(u / u.sum())
    losses = rng.uniform(0.0, 5.0, size=4)
    want = sum(w.alpha[i] * losses[i] for i in range(4))
    assert weighted_total_loss(losses, w) == pytest.approx(want, rel=1e-14)


def test_weighted_total_length_mismatch():
    with pytest.raises(LengthMismatch):
        weighted_total_loss(np.ones(2), LossWeights(np.array([1.0])))


# --- hyperparams -------------------------------------------------------------------

def test_hyperparams_defaults_match_published_recipe():
    hp = HyperParams()
    assert hp.batch_size == 32
    assert hp.learning_rate == 5e-6
    assert (hp.adam_beta1, hp.adam_beta2, hp.adam_eps) == (0.9, 0.999, 1e-8)
    assert HYPERPARAM_PRESETS["backbone-short"].epochs == 10
    assert HYPERPARAM_PRESETS["backbone-long"].epochs == 50


def test_hyperparams_validation():
    with pytest.raises(InvalidConfig):
        HyperParams(epochs=-1)
    with pytest.raises(InvalidConfig):
        HyperParams(adam_beta1=1.0)
    with pytest.raises(InvalidConfig):
        HyperParams(learning_rate=0.0)


# --- fit ---------------------------------------------------------------------------

def test_fit_overfits_small_synthetic_set():
    manifest = desk_manifest(seed=5, groups=8, per_group=4)
    assert len(manifest) == 32
    hp = HyperParams(epochs=200, batch_size=32, learning_rate=2e-2, seed=42)
    ckpt = fit(manifest, hp, encoder_cfg=DESK_CFG)
    first = np.mean(list(ckpt.history[0]["loss"].values()))
    last = np.mean(list(ckpt.history[-1]["loss"].values()))
    assert last < 0.01 * first


def test_fit_dynamic_alpha_stays_simplex():
    manifest = desk_manifest(seed=6, groups=4, per_group=4)
    hp = desk_hp(epochs=12)
    ckpt = fit(manifest, hp, weighting="dynamic", encoder_cfg=DESK_CFG)
    for entry in ckpt.history:
        total = sum(entry["alpha"].values())
        assert abs(total - 1.0) <= 1e-9
        assert all(a >= 0.0 for a in entry["alpha"].values())


def test_fit_same_seed_bit_identical():
    manifest = desk_manifest(seed=7, groups=4, per_group=4)
    hp = desk_hp(epochs=8)
    a = fit(manifest, hp, encoder_cfg=DESK_CFG)
    b = fit(manifest, hp, encoder_cfg=DESK_CFG)
    pa, pb = flat_params(a.model), flat_params(b.model)
    assert set(pa) == set(pb)
    for name in pa:
        assert np.array_equal(pa[name], pb[name]), name
    assert a.history == b.history


def test_fit_seed_changes_outcome():
    manifest = desk_manifest(seed=7, groups=4, per_group=4)
    a = fit(manifest, desk_hp(epochs=8, seed=1), encoder_cfg=DESK_CFG)
    b = fit(manifest, desk_hp(epochs=8, seed=2), encoder_cfg=DESK_CFG)
    assert not np.array_equal(flat_params(a.model)["head.r"],
                              flat_params(b.model)["head.r"])


def test_fit_rejects_empty_and_oversized_batch():
    manifest = desk_manifest(seed=8, groups=2, per_group=2)
    with pytest.raises(BatchTooLarge):
        fit(manifest, desk_hp(batch_size=64), encoder_cfg=DESK_CFG)
    empty = manifest.__class__(records=(), metric_names=manifest.metric_names,
                               score_range=manifest.score_range)
    with pytest.raises(EmptyManifest):
        fit(empty, desk_hp(), encoder_cfg=DESK_CFG)


def test_fit_requires_normalized_manifest():
    raw = make_synthetic_manifest(n_groups=2, per_group=2, d_in=8, seed=9)
    with pytest.raises(InvalidConfig):
        fit(raw, desk_hp(), encoder_cfg=DESK_CFG)


def test_fit_freeze_encoder_keeps_encoder_fixed():
    manifest = desk_manifest(seed=10, groups=4, per_group=4)
    ckpt = fit(manifest, desk_hp(epochs=6), encoder_cfg=DESK_CFG, freeze_encoder=True)
    from metricforge.pipeline import build_model
    fresh = build_model(ckpt.model.encoder.cfg, ckpt.metric_names,
                        seed=desk_hp().seed)
    for name, arr in ckpt.model.encoder.params.items():
        assert np.array_equal(arr, fresh.encoder.params[name]), name
    assert not np.array_equal(ckpt.model.head.r, fresh.head.r)


# --- second training ----------------------------------------------------------------

def test_second_training_zero_epochs_transfers_weights_resets_optimizer():
    manifest = desk_manifest(seed=11, groups=4, per_group=4)
    first = fit(manifest, desk_hp(epochs=10), selector=TaskSelector(("quality",)),
                encoder_cfg=DESK_CFG)
    assert first.optimizer_state["step"] > 0
    second = second_training(first, manifest, desk_hp(epochs=0),
                             TaskSelector(("alignment",)))
    pa, pb = flat_params(first.model), flat_params(second.model)
    for name in pa:
        assert np.array_equal(pa[name], pb[name]), name
    assert second.optimizer_state["step"] == 0
    assert second.optimizer_state["m"] == {}


def test_second_training_improves_new_task_and_chains_provenance():
    manifest = make_synthetic_manifest(
        n_groups=15, per_group=5, d_in=8, image_tokens=4, seed=23,
        label_gain=2.0, metric_names=("quality", "alignment"))
    train, test = content_isolated_split(manifest, SplitSpec(0.8, 77))
    train, test = normalize_scores(train), normalize_scores(test)
    hp = desk_hp(epochs=120)
    first = fit(train, hp, selector=TaskSelector(("quality",)), encoder_cfg=DESK_CFG)

    def alignment_loss(model):
        _, preds, targets = predict_manifest(model, test)
        j = model.metric_names.index("alignment")
        return float(np.mean((preds[:, j] - targets[:, j]) ** 2))

    before = alignment_loss(first.model)
    second = second_training(first, train, hp, TaskSelector(("alignment",)))
    after = alignment_loss(second.model)
    assert after < before
    assert second.provenance["stages"] == [["quality"], ["alignment"]]


def test_second_training_warns_on_repeat_selector():
    manifest = desk_manifest(seed=12, groups=4, per_group=4)
    first = fit(manifest, desk_hp(epochs=2), selector=TaskSelector(("quality",)),
                encoder_cfg=DESK_CFG)
    with pytest.warns(UserWarning):
        second_training(first, manifest, desk_hp(epochs=0), TaskSelector(("quality",)))


def test_second_training_version_check():
    manifest = desk_manifest(seed=13, groups=4, per_group=4)
    first = fit(manifest, desk_hp(epochs=1), encoder_cfg=DESK_CFG)
    stale = Checkpoint(model=first.model, optimizer_state=first.optimizer_state,
                       hyperparams=first.hyperparams,
                       metric_names=first.metric_names, history=first.history,
                       provenance=first.provenance, version=99)
    with pytest.raises(VersionMismatch):
        second_training(stale, manifest, desk_hp(epochs=0), TaskSelector(("quality",)))


# --- checkpoints ---------------------------------------------------------------------

def _small_checkpoint(seed=14):
    manifest = desk_manifest(seed=seed, groups=4, per_group=4)
    return fit(manifest, desk_hp(epochs=4), weighting="dynamic",
               encoder_cfg=DESK_CFG)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ckpt = _small_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.version == ckpt.version
    assert back.metric_names == ckpt.metric_names
    assert back.hyperparams == ckpt.hyperparams
    assert back.history == ckpt.history
    assert back.provenance == ckpt.provenance
    pa, pb = flat_params(ckpt.model), flat_params(back.model)
    for name in pa:
        assert np.array_equal(pa[name], pb[name]), name
    for slot in ("m", "v"):
        assert set(back.optimizer_state[slot]) == set(ckpt.optimizer_state[slot])
        for name in ckpt.optimizer_state[slot]:
            assert np.array_equal(ckpt.optimizer_state[slot][name],
                                  back.optimizer_state[slot][name]), (slot, name)
    assert back.optimizer_state["step"] == ckpt.optimizer_state["step"]


def test_checkpoint_detects_corrupted_tensor(tmp_path):
    ckpt = _small_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ckpt")
    victim = sorted((tmp_path / "ckpt").glob("t*.mft"))[0]
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_detects_truncated_tensor(tmp_path):
    ckpt = _small_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ckpt")
    victim = sorted((tmp_path / "ckpt").glob("t*.mft"))[0]
    victim.write_bytes(victim.read_bytes()[:-4])
    with pytest.raises(ChecksumMismatch):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_version_bump_rejected(tmp_path):
    ckpt = _small_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ckpt")
    index_path = tmp_path / "ckpt" / "index.json"
    index = json.loads(index_path.read_text())
    index["version"] = 2
    index_path.write_text(json.dumps(index))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_missing_pieces(tmp_path):
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "nothing")
    ckpt = _small_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ckpt")
    sorted((tmp_path / "ckpt").glob("t*.mft"))[0].unlink()
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "ckpt")


def test_history_csv_columns(tmp_path):
    ckpt = _small_checkpoint()
    path = tmp_path / "history.csv"
    write_history_csv(ckpt.history, ckpt.metric_names, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ("epoch,loss_quality,loss_alignment,loss_authenticity,"
                        "alpha_quality,alpha_alignment,alpha_authenticity")
    assert len(lines) == 1 + len(ckpt.history)


def test_adam_moves_parameters_toward_gradient():
    hp = HyperParams(epochs=1, learning_rate=0.1, seed=0)
    params = {"w": np.array([1.0, -1.0], dtype=np.float32)}
    adam = Adam(hp)
    adam.step(params, {"w": np.array([1.0, -2.0], dtype=np.float32)})
    assert params["w"][0] < 1.0
    assert params["w"][1] > -1.0
