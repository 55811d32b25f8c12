import dataclasses

import pytest
import torch

from pedgan.config import AblationFlags, TrainConfig
from pedgan.errors import CheckpointError, TrainingAborted
from pedgan.training import (auc, discriminator_phase, generator_parameters, generator_phase, init_state,
                             load_checkpoint, parameter_snapshot, run_training, sample_batch,
                             save_checkpoint, train_step, unchanged, _forward)


def losses(records):
    return [(r["total"], r["d_global"], r["d_part"]) for r in records]


def test_identical_seeds_give_identical_loss_streams(tiny_config, tiny_data):
    a = run_training(init_state(tiny_config, tiny_data), tiny_data, 3)
    b = run_training(init_state(tiny_config, tiny_data), tiny_data, 3)
    assert losses(a) == losses(b)
    c = run_training(init_state(dataclasses.replace(tiny_config, seed=1), tiny_data), tiny_data, 3)
    assert losses(a) != losses(c)


def test_phases_touch_only_their_own_parameters(tiny_config, tiny_data):
    state = init_state(tiny_config, tiny_data)
    g_params = generator_parameters(state.models)
    d_params = list(state.models.discriminators.parameters())
    frozen = list(state.models.text_encoder.parameters()) + list(state.models.image_encoder.parameters())
    fw = _forward(state, sample_batch(state, tiny_data))

    g0, d0, f0 = parameter_snapshot(g_params), parameter_snapshot(d_params), parameter_snapshot(frozen)
    discriminator_phase(state, fw)
    assert unchanged(g_params, g0)
    assert not unchanged(d_params, d0)

    d1 = parameter_snapshot(d_params)
    generator_phase(state, fw)
    assert unchanged(d_params, d1)
    assert not unchanged(g_params, g0)
    assert unchanged(frozen, f0)
    assert all(p.requires_grad for p in state.d_params)


def family(state, name):
    out = []
    for d in state.models.discriminators:
        if name == "no-hpd":
            out += list(d.hpd_parameters())
        elif name == "no-visa":
            out += list(d.visa_parameters())
        else:
            out += list(d.sca_parameters())
    return out


@pytest.mark.parametrize("name", ["no-hpd", "no-visa", "no-sca"])
def test_ablated_family_is_bit_identical_after_a_step(name, tiny_config, tiny_data):
    cfg = dataclasses.replace(tiny_config, ablation=AblationFlags.from_names([name]))
    state = init_state(cfg, tiny_data)
    params = family(state, name)
    snap = parameter_snapshot(params)
    train_step(state, sample_batch(state, tiny_data))
    assert unchanged(params, snap)
    assert not any(p.requires_grad for p in params)
    assert not {id(p) for p in params} & {id(p) for p in state.d_params}

    # with every branch enabled the same family does move
    full = init_state(tiny_config, tiny_data)
    params = family(full, name)
    snap = parameter_snapshot(params)
    train_step(full, sample_batch(full, tiny_data))
    assert not unchanged(params, snap)


def test_checkpoint_round_trip_reproduces_losses(tiny_config, tiny_data, tmp_path):
    state = init_state(tiny_config, tiny_data)
    run_training(state, tiny_data, 2)
    path = tmp_path / "ck.pt"
    save_checkpoint(state, path)
    straight = run_training(state, tiny_data, 10)
    resumed_state = load_checkpoint(path, tiny_config)
    assert resumed_state.step == 2
    resumed = run_training(resumed_state, tiny_data, 10)
    assert losses(straight) == losses(resumed)
    assert [r["step"] for r in resumed] == list(range(3, 13))


def test_truncated_checkpoint_rejected(tiny_config, tiny_data, tmp_path):
    state = init_state(tiny_config, tiny_data)
    path = tmp_path / "ck.pt"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pt")


def test_config_hash_mismatch_rejected(tiny_config, tiny_data, tmp_path):
    state = init_state(tiny_config, tiny_data)
    path = tmp_path / "ck.pt"
    save_checkpoint(state, path)
    other = dataclasses.replace(tiny_config, lambda_damsm=1.0)
    assert other.config_hash() != tiny_config.config_hash()
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, other)
    # bookkeeping fields do not enter the hash
    assert dataclasses.replace(tiny_config, steps=7).config_hash() == tiny_config.config_hash()


def test_nan_aborts_with_term_and_step(tiny_config, tiny_data):
    state = init_state(tiny_config, tiny_data)
    run_training(state, tiny_data, 1)
    with torch.no_grad():
        state.models.generator.heads[0].conv.weight.fill_(float("nan"))
    with pytest.raises(TrainingAborted) as info:
        train_step(state, sample_batch(state, tiny_data))
    assert info.value.step == 1 and info.value.term


def test_auc_oracle():
    assert auc([1, 2, 3], [0, 0.5]) == 1.0
    assert auc([0], [1]) == 0.0
    assert auc([1, 1], [1]) == 0.5
    pos, neg = [0.3, 0.9, 0.5], [0.4, 0.1]
    pairs = [(p > n) + 0.5 * (p == n) for p in pos for n in neg]
    assert auc(pos, neg) == sum(pairs) / len(pairs)


def test_config_round_trip_and_unknown_keys(tiny_config):
    again = TrainConfig.from_dict(tiny_config.to_dict())
    assert again.config_hash() == tiny_config.config_hash()
    d = tiny_config.to_dict()
    d["bogus"] = 1
    with pytest.raises(ValueError):
        TrainConfig.from_dict(d)


def test_yaml_and_json_configs(tmp_path):
    from pedgan.config import load_config
    from pedgan.errors import InputError
    y = tmp_path / "c.yaml"
    y.write_text("profile: tiny\nbatch_size: 4\nablation: {use_hpd: false, use_visa: true, use_sca: true}\n")
    cfg = load_config(y)
    assert cfg.batch_size == 4 and cfg.ablation.use_hpd is False
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InputError, match="bad.json"):
        load_config(bad)
    unknown = tmp_path / "u.json"
    unknown.write_text('{"learning_rate": 1}')
    with pytest.raises(InputError):
        load_config(unknown)
