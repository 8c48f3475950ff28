"""Checkpoint container: bitwise round trips, corruption detection, and
version gating."""

import os
import struct

import hashlib

import numpy as np
import pytest

from actlm.checkpoint import (CheckpointError, FORMAT_VERSION, MAGIC,
                              load_checkpoint, save_checkpoint)
from actlm.config import ArchConfig
from actlm.model import init_model


CFG = ArchConfig(vocab_size=9, d_model=8, n_heads=2, max_seq_len=12,
                 intermediate_dim=16, codebook_size=4)


def test_round_trip_is_bitwise(tmp_path):
    state = init_model(CFG, 7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path, stage="stage1", step=42, rng_state=[1, 2])
    loaded, meta = load_checkpoint(path)
    assert meta == {"stage": "stage1", "step": 42, "rng_state": [1, 2]}
    assert loaded.cfg == CFG
    assert set(loaded.groups) == set(state.groups)
    for g in state.groups:
        for k in state.groups[g]:
            a, b = state.groups[g][k].data, loaded.groups[g][k].data
            assert a.dtype == b.dtype
            assert a.tobytes() == b.tobytes()


def test_save_is_deterministic(tmp_path):
    state = init_model(CFG, 1)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(state, p1, stage="x", step=1)
    save_checkpoint(state, p2, stage="x", step=1)
    assert p1.read_bytes() == p2.read_bytes()


def test_corruption_detected(tmp_path):
    state = init_model(CFG, 0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    state = init_model(CFG, 0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "not.ckpt"
    body = b"XXXX" + b"\x00" * 16
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_version_mismatch_refused(tmp_path):
    state = init_model(CFG, 0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    blob = bytearray(path.read_bytes()[:-32])
    struct.pack_into("<I", blob, len(MAGIC), FORMAT_VERSION + 1)
    blob += hashlib.sha256(bytes(blob)).digest()
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_no_temp_file_left_behind(tmp_path):
    state = init_model(CFG, 0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    assert os.listdir(tmp_path) == ["model.ckpt"]
