# Copyright 2026 The flow4d Authors
# SPDX-License-Identifier: Apache-2.0

import math

import numpy as np
import pytest

import flow4d


def test_phantom_sequence_shape_and_labels():
    seq = flow4d.phantom_sequence(3, frames=4, dims=[16, 16, 20])
    assert seq.shape == (4, 20, 16, 16)
    assert seq.dtype == np.uint8
    assert set(np.unique(seq)) <= set(range(6))
    assert np.array_equal(seq, flow4d.phantom_sequence(3, frames=4, dims=[16, 16, 20]))


def test_grid_round_trip(tmp_path):
    seq = flow4d.phantom_sequence(1, frames=3, dims=[16, 16, 20])
    flow4d.save_grid(tmp_path / "a.grid", seq[0])
    assert np.array_equal(flow4d.load_grid(tmp_path / "a.grid"), seq[0])
    flow4d.save_sequence(tmp_path / "a.seq", seq)
    assert np.array_equal(flow4d.load_sequence(tmp_path / "a.seq"), seq)


def test_metrics():
    seq = flow4d.phantom_sequence(2, frames=6, dims=[16, 16, 20])
    assert flow4d.dsc(seq[0], seq[0], 1) == 1.0
    assert flow4d.hd95(seq[0], seq[0], 1) == 0.0
    assert 0.0 < flow4d.cycle_dsc(seq) <= 1.0
    with pytest.raises(flow4d.DimensionError):
        flow4d.dsc(seq[0], seq[0][:10], 1)
    t, p, dof = flow4d.paired_ttest([2.0, 4.0, 6.0], [1.0, 2.0, 3.0])
    assert abs(t - 2.0 * math.sqrt(3.0)) < 1e-9
    assert abs(p - 0.0742) < 1e-3
    assert dof == 2
    seqs = [flow4d.phantom_sequence(s, frames=4, dims=[16, 16, 20]) for s in range(6)]
    assert abs(flow4d.vfid(seqs, seqs)) < 1e-9


def test_pgk():
    assert flow4d.pgk_distance(1, 20, 20) == 1.0
    k = flow4d.pgk_encode(1, 50, 1.5)
    assert k.shape == (50,)
    assert abs(k[0] - 0.26596) < 1e-5
    assert abs(k[1] - k[49]) < 1e-15


def test_corrupt_marks_unknown():
    grid = flow4d.phantom_sequence(0, frames=1)[0]
    sparse = flow4d.corrupt(grid, 1.0, 7)
    assert sparse.shape == grid.shape
    assert (sparse == 6).mean() > 0.5


def test_cli_pipeline(tmp_path):
    data = str(tmp_path / "data")
    assert flow4d.run_cli(["phantom", "gen", "--subjects", "2", "--frames", "3", "--dims", "16,16,20",
                           "--out", data]) == 0
    ckpt = str(tmp_path / "ae.ckpt")
    assert flow4d.run_cli(["train", "ae", "--data", data, "--epochs", "2", "--latent-dim", "4",
                           "--encoder-hidden", "16", "--decoder-hidden", "16", "--out", ckpt]) == 0
    ae = flow4d.Autoencoder.load(ckpt)
    assert ae.latent_dim == 4
    grid = flow4d.load_sequence(str(tmp_path / "data" / "subject_0000.seq"))[0]
    z = ae.encode(grid)
    assert z.shape == (4,)
    assert np.array_equal(ae.encode(grid), z)
    decoded = ae.decode(z)
    assert decoded.shape == grid.shape
    assert flow4d.run_cli(["eval", "--pred", data]) != 0


def test_autoencoder_train_in_memory():
    seq = flow4d.phantom_sequence(0, frames=2, dims=[8, 8, 8])
    kwargs = dict(latent_dim=4, epochs=1, seed=5, max_shift=1, weight_decay=0.01)
    a = flow4d.Autoencoder.train(list(seq), **kwargs)
    b = flow4d.Autoencoder.train(list(seq), **kwargs)
    assert a.latent_dim == 4
    assert np.array_equal(a.encode(seq[0]), b.encode(seq[0]))
    assert a.decode(a.encode(seq[0])).shape == seq[0].shape
    with pytest.raises(ValueError):
        flow4d.Autoencoder.train(list(seq), latent_dim=4, epochs=1, max_shift=-1)
