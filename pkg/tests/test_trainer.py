import json
from dataclasses import replace

import numpy as np
import pytest

from dupr import tensor as T
from dupr.encoder import CheckpointError, EncoderConfig, op_counts
from dupr.geometry import AugmentConfig
from dupr.trainer import (METRIC_FIELDS, TrainConfig, TrainingDiverged, active_params,
                          assemble_batch, batch_indices, image_only_step, init_state,
                          load_checkpoint, load_config, load_images, make_view_pair,
                          read_metrics, run, save_checkpoint, step_loss, train_step)

TINY_ENC = EncoderConfig(channels=(8, 8, 8, 8), blocks=1, groups=4, dim=8)


def tiny(tmp_path, **kw):
    base = dict(steps=4, batch_size=2, bank_size=8, roi_sizes=(2, 2, 2, 2), image_size=32,
                encoder=TINY_ENC, augment=AugmentConfig(out_size=32),
                dataset={"kind": "synthetic", "count": 6, "seed": 1},
                out_dir=str(tmp_path / "run"), checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base)


def batch(state, step=0):
    images = load_images(state.config)
    return assemble_batch(state, images, step, batch_indices(state.config, step, len(images)))


# ---------------------------------------------------------------- config

def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = tiny(tmp_path)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(T.ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_load_config_toml_and_json(tmp_path):
    (tmp_path / "c.toml").write_text('steps = 7\nalpha = [0, 0, 0, 1]\n[encoder]\ndim = 16\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.steps == 7 and cfg.alpha == (0.0, 0.0, 0.0, 1.0) and cfg.encoder.dim == 16
    (tmp_path / "c.json").write_text(json.dumps({"bank_size": 12}))
    assert load_config(tmp_path / "c.json").bank_size == 12


@pytest.mark.parametrize("bad", [{"bank_init": "zeros"}, {"patch_reduction": "max"},
                                 {"m_coef": 1.5}, {"alpha": (1.0,)}, {"tau": 0.0}])
def test_config_validation(tmp_path, bad):
    with pytest.raises(T.ConfigError):
        tiny(tmp_path, **bad).validate()


def test_volatile_fields_do_not_change_hash(tmp_path):
    a = tiny(tmp_path)
    assert a.config_hash() == replace(a, out_dir="elsewhere", workers=3).config_hash()
    assert a.config_hash() != replace(a, base_lr=0.5).config_hash()


# ---------------------------------------------------------------- data

def test_epoch_permutations_cover_every_image(tmp_path):
    cfg = tiny(tmp_path, batch_size=4)
    seen = [i for s in range(3) for i in batch_indices(cfg, s, 6)]
    assert sorted(seen[:6]) == list(range(6)) and sorted(seen[6:12]) == list(range(6))
    assert seen == [i for s in range(3) for i in batch_indices(cfg, s, 6)]


def test_view_pair_always_overlaps():
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    aug = AugmentConfig(out_size=32, scale=(0.02, 0.05))
    rng = np.random.default_rng(1)
    for _ in range(30):
        p = make_view_pair(img, rng, aug)
        assert p.box1.area > 0 and p.box2.area > 0
        assert p.view1.shape == (32, 32, 3)


def test_parallel_workers_match_serial(tmp_path):
    s1 = init_state(tiny(tmp_path))
    s2 = init_state(tiny(tmp_path, workers=3))
    for a, b in zip(batch(s1), batch(s2)):
        assert a.view1.tobytes() == b.view1.tobytes() and a.t2 == b.t2


# ---------------------------------------------------------------- step

def test_key_branch_gets_no_gradient(tmp_path):
    state = init_state(tiny(tmp_path))
    parts = step_loss(state.config, state.pair, state.banks, batch(state))
    T.backward(parts.total)
    assert all(not k.requires_grad and k.grad is None for k in state.pair.key.values())
    assert all(p.grad is not None for p in active_params(state.pair.query, state.config).values())


def test_inactive_levels_are_not_computed(tmp_path):
    state = init_state(tiny(tmp_path, alpha=(0, 0, 0, 1.0), beta=(0, 0, 0, 0)))
    op_counts.clear()
    train_step(state, batch(state))
    assert op_counts["roi_align"] == 0 and op_counts["project_patches"] == 0
    assert op_counts["project_image"] == 2
    assert set(state.banks) == {("image", 3)}


def test_step_metrics_and_bank_fill(tmp_path):
    state = init_state(tiny(tmp_path))
    m = train_step(state, batch(state))
    assert m.step == 0 and state.step == 1
    assert m.patch[0] is None and m.patch[2] is not None and all(v is not None for v in m.image)
    assert m.bank_fill_img == 2 and m.bank_fill_patch == 8
    assert len(m.row()) == len(METRIC_FIELDS)


def test_divergence_dumps_state(tmp_path):
    state = init_state(tiny(tmp_path))
    state.pair.query["stem.conv"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_step(state, batch(state))
    assert list((tmp_path / "run").glob("diverged_step000000.dupr"))


def test_image_only_path_matches(tmp_path):
    cfg = tiny(tmp_path, alpha=(0, 0, 0, 1.0), beta=(0, 0, 0, 0))
    a, b = init_state(cfg), init_state(cfg)
    for step in range(3):
        pairs = batch(a, step)
        la = train_step(a, pairs).total
        lb = image_only_step(b, pairs)
        assert la == lb
    for name, p in a.pair.query.items():
        assert p.data.tobytes() == b.pair.query[name].data.tobytes()


# ---------------------------------------------------------------- runs

def test_run_is_deterministic(tmp_path):
    run(tiny(tmp_path, out_dir=str(tmp_path / "a")))
    run(tiny(tmp_path, out_dir=str(tmp_path / "b")))
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [r["step"] for r in rows] == ["0", "1", "2", "3"]


def test_resume_is_bitwise(tmp_path):
    cfg = tiny(tmp_path, out_dir=str(tmp_path / "full"))
    final = load_checkpoint(run(cfg))
    part = replace(cfg, out_dir=str(tmp_path / "part"))
    resumed = load_checkpoint(run(part, resume=tmp_path / "full" / "ckpt_000002.dupr"))
    assert resumed.step == final.step == 4
    for name, p in final.pair.query.items():
        assert p.data.tobytes() == resumed.pair.query[name].data.tobytes()
        assert final.pair.key[name].data.tobytes() == resumed.pair.key[name].data.tobytes()
    for key, bank in final.banks.items():
        assert bank.keys.tobytes() == resumed.banks[key].keys.tobytes()
    full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
    part_rows = (tmp_path / "part" / "metrics.csv").read_text().splitlines()
    assert part_rows == [full_rows[0]] + full_rows[3:]


def test_resume_rejects_other_config(tmp_path):
    cfg = tiny(tmp_path)
    ckpt = run(cfg)
    with pytest.raises(CheckpointError, match="hash"):
        run(replace(cfg, base_lr=1.0), resume=ckpt)


def test_checkpoint_architecture_mismatch(tmp_path):
    state = init_state(tiny(tmp_path))
    path = save_checkpoint(state, tmp_path / "s.dupr")
    other = tiny(tmp_path, encoder=EncoderConfig(channels=(8, 8, 8, 16), blocks=1, groups=4, dim=8))
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, other)


def test_frozen_system_keeps_parameters(tmp_path):
    cfg = tiny(tmp_path, m_coef=1.0, base_lr=0.0)
    a, b = init_state(cfg), init_state(cfg)
    before = {n: p.data.copy() for n, p in a.pair.query.items()}
    pairs = batch(a)
    assert train_step(a, pairs).total == train_step(b, pairs).total
    train_step(a, batch(a, 1))
    for name, p in a.pair.query.items():
        assert np.array_equal(p.data, before[name])
        assert np.array_equal(a.pair.key[name].data, before[name])


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    cfg = tiny(tmp_path, steps=0)
    saved = load_checkpoint(run(cfg))
    fresh = init_state(cfg)
    assert saved.step == 0
    for name, p in fresh.pair.query.items():
        assert p.data.tobytes() == saved.pair.query[name].data.tobytes()
    assert read_metrics(tmp_path / "run" / "metrics.csv") == []


def test_save_load_round_trip_is_exact(tmp_path):
    state = init_state(tiny(tmp_path))
    train_step(state, batch(state))
    back = load_checkpoint(save_checkpoint(state, tmp_path / "s.dupr"))
    assert back.step == state.step
    for name, p in state.pair.query.items():
        assert np.max(np.abs(p.data - back.pair.query[name].data)) == 0
    assert state.buffers.keys() == back.buffers.keys()
    for name, buf in state.buffers.items():
        assert np.array_equal(buf, back.buffers[name])
    for key, bank in state.banks.items():
        assert bank.state() == back.banks[key].state()
    assert state.rng.random() == back.rng.random()


def test_probe_encoder_carries_training_roi_sizes(tmp_path):
    from dupr.diagnostics import FeatureEncoder

    enc = FeatureEncoder.from_checkpoint(run(tiny(tmp_path, steps=0)))
    assert enc.roi_sizes == (2, 2, 2, 2) and enc.cfg == TINY_ENC
