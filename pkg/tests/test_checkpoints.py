"""Checkpoint round-trips, integrity checking, and config serialization."""

import json

import numpy as np
import pytest

from conftest import make_model_config
from moax.checkpoints import (load_checkpoint, model_config_from_dict,
                              model_config_to_dict, plan_from_dict, plan_to_dict,
                              read_manifest, save_checkpoint)
from moax.errors import CheckpointError
from moax.gating import TopP
from moax.model import build_model
from moax.tasks import SyntheticTask, generate
from moax.training import Hyper, train


def trained_model(seed=3, **cfg_kw):
    cfg = make_model_config(**cfg_kw)
    model = build_model(cfg, seed=seed)
    data = generate(SyntheticTask(kind="token-copy", seed=1, n_train=16, n_eval=8,
                                  seq_len=cfg.seq_len, vocab_size=cfg.vocab_size))
    train(model, data, Hyper(lr=0.5, steps=6, batch_size=4), seed=2)
    return model


def test_round_trip_restores_every_trainable(tmp_path):
    model = trained_model()
    save_checkpoint(model, tmp_path, step=6, seed=3)
    restored, manifest = load_checkpoint(tmp_path)
    assert manifest["step"] == 6
    for (n1, a1), (n2, a2) in zip(model.trainables(), restored.trainables()):
        assert n1 == n2
        assert np.array_equal(a1, a2), n1
    for key in model.base:
        assert np.array_equal(model.base[key], restored.base[key]), key


def test_round_trip_with_placeholders_and_renorm_flag(tmp_path):
    model = trained_model(experts=2, placeholders=2, k=2, renorm_true_only=True)
    save_checkpoint(model, tmp_path, step=6, seed=3)
    restored, _ = load_checkpoint(tmp_path)
    assert restored.cfg.renorm_true_only
    handle = restored.sites[0].site
    assert [e.is_placeholder for e in handle.experts] == [False, False, True, True]
    for (n1, a1), (_, a2) in zip(model.trainables(), restored.trainables()):
        assert np.array_equal(a1, a2), n1


def test_manifest_is_sorted_json_with_integrity_fields(tmp_path):
    model = trained_model()
    save_checkpoint(model, tmp_path, step=6, seed=3)
    raw = (tmp_path / "manifest.json").read_text()
    manifest = json.loads(raw)
    assert raw == json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    assert manifest["format"] == "moax-checkpoint-v1"
    assert manifest["arrays_bytes"] == (tmp_path / "arrays.bin").stat().st_size
    assert len(manifest["arrays_sha256"]) == 64
    assert read_manifest(tmp_path) == manifest


def test_save_is_byte_deterministic(tmp_path):
    model = trained_model()
    d1, d2 = tmp_path / "a", tmp_path / "b"
    d1.mkdir(), d2.mkdir()
    save_checkpoint(model, d1, step=6, seed=3)
    save_checkpoint(model, d2, step=6, seed=3)
    assert (d1 / "arrays.bin").read_bytes() == (d2 / "arrays.bin").read_bytes()
    assert (d1 / "manifest.json").read_text() == (d2 / "manifest.json").read_text()


def test_corrupted_arrays_are_rejected(tmp_path):
    model = trained_model()
    save_checkpoint(model, tmp_path, step=6, seed=3)
    blob = bytearray((tmp_path / "arrays.bin").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "arrays.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(tmp_path)
    assert "sha256" in str(exc.value)


def test_truncated_arrays_are_rejected(tmp_path):
    model = trained_model()
    save_checkpoint(model, tmp_path, step=6, seed=3)
    blob = (tmp_path / "arrays.bin").read_bytes()
    (tmp_path / "arrays.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(tmp_path)
    assert "bytes" in str(exc.value)


def test_missing_checkpoint_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")


def test_plan_dict_round_trip():
    plan = make_model_config(experts=3, rank=4, k=2, placeholders=1).plan
    assert plan_from_dict(plan_to_dict(plan)) == plan
    topp_plan = make_model_config(policy=TopP(0.6)).plan
    assert plan_from_dict(plan_to_dict(topp_plan)) == topp_plan


def test_model_config_dict_round_trip():
    cfg = make_model_config(nonlinearity="relu", renorm_true_only=True,
                            adapter_sites="ffn+attn")
    assert model_config_from_dict(model_config_to_dict(cfg)) == cfg
