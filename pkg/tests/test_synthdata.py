import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dystab.flow import warp
from dystab.synthdata import (KINDS, SceneSpec, SpecError, generate_corpus, generate_sequence, load_corpus,
                              random_spec, save_corpus, split_corpus)


def spec(**kw):
    base = dict(height=32, width=32, n_frames=4, radius=5.0, start=(12.0, 14.0),
                velocities=[(2.0, 1.0)] * 3, pan=(0.5, 0.0), sprite_texture=3, background_texture=6, seed=1)
    base.update(kw)
    return SceneSpec(**base)


def test_sequence_shapes_and_ranges():
    seq = generate_sequence(spec())
    assert seq.frames.shape == (4, 32, 32, 3)
    assert seq.masks.shape == (4, 32, 32) and seq.masks.dtype == bool
    assert seq.flows_fw.shape == seq.flows_bw.shape == (3, 32, 32, 2)
    assert 0 <= seq.frames.min() and seq.frames.max() <= 1


def test_gt_flow_moves_the_mask():
    seq = generate_sequence(spec())
    for t in range(3):
        # sprite pixels of frame t land on the sprite in frame t+1
        moved = warp(seq.masks[t + 1].astype(np.float32), seq.flows_fw[t]) >= 0.5
        assert moved[seq.masks[t]].mean() > 0.95
    np.testing.assert_allclose(seq.flows_fw[0][~seq.masks[0]], [[-0.5, 0.0]] * (~seq.masks[0]).sum())


def test_pair_flow_matches_adjacent_and_composes():
    seq = generate_sequence(spec())
    np.testing.assert_array_equal(seq.pair_flow(1, 2), seq.flows_fw[1])
    np.testing.assert_array_equal(seq.pair_flow(2, 1), seq.flows_bw[1])
    f = seq.pair_flow(0, 3)
    np.testing.assert_allclose(f[seq.masks[0]][0], [4.5, 3.0], atol=1e-5)


def test_generation_is_deterministic():
    a, b = generate_sequence(spec()), generate_sequence(spec())
    np.testing.assert_array_equal(a.frames, b.frames)
    c = generate_sequence(spec(seed=2))
    assert not np.array_equal(a.frames, c.frames)


def test_motion_modes():
    s = spec(motion_mode="always-static")
    assert not s.effective_velocities().any()
    seq = generate_sequence(s)
    assert not seq.informative(0, 1)
    s = spec(motion_mode="static-after-k", static_after=1)
    v = s.effective_velocities()
    assert v[0].any() and not v[1:].any()
    seq = generate_sequence(s)
    assert seq.informative(0, 1) and not seq.informative(1, 3)


def test_camouflage_shares_palette():
    seq = generate_sequence(spec(camouflage=True))
    inside = seq.frames[0][seq.masks[0]].mean(0)
    outside = seq.frames[0][~seq.masks[0]].mean(0)
    assert np.abs(inside - outside).max() < 0.2


@pytest.mark.parametrize("kw", [
    dict(height=200), dict(n_frames=1), dict(shape="star"), dict(motion_mode="teleport"),
    dict(sprite_texture=9), dict(velocities=[(1.0, 0.0)]), dict(velocities=[(9.0, 0.0)] * 3),
    dict(start=(3.0, 14.0)), dict(velocities=[(6.0, 0.0)] * 3),
])
def test_invalid_specs_rejected(kw):
    with pytest.raises(SpecError):
        generate_sequence(spec(**kw))


def test_spec_json_round_trip():
    s = spec()
    assert SceneSpec.from_json(s.to_json()) == s


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 2 ** 31 - 1), st.sampled_from([16, 32, 64]))
def test_random_specs_are_valid(kind, seed, size):
    s = random_spec(np.random.default_rng(seed), kind, size, size, n_frames=6)
    s.validate()
    assert s.camouflage == (kind == "camouflage")
    seq = generate_sequence(s)
    # the sprite never touches the image border
    assert not seq.masks[:, 0].any() and not seq.masks[:, -1].any()
    assert not seq.masks[:, :, 0].any() and not seq.masks[:, :, -1].any()
    assert seq.masks.any(axis=(1, 2)).all()


def test_corpus_mix_and_determinism():
    mix = {"plain": 0.5, "camouflage": 0.25, "always_static": 0.25}
    a = generate_corpus(8, mix, seed=4, height=16, width=16, n_frames=4)
    b = generate_corpus(8, mix, seed=4, height=16, width=16, n_frames=4)
    kinds = [s.seq_id.split("_", 1)[1] for s in a]
    assert kinds.count("plain") == 4 and kinds.count("camouflage") == 2 and kinds.count("always_static") == 2
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.frames, y.frames)
    with pytest.raises(SpecError):
        generate_corpus(4, {"plain": 0.7})


def test_families_restrict_textures():
    corpus = generate_corpus(6, {"plain": 1.0}, seed=0, height=16, width=16, n_frames=3, families=(2, 5))
    for seq in corpus:
        assert {seq.spec.sprite_texture, seq.spec.background_texture} <= {2, 5}


def test_split_corpus():
    train, val = split_corpus(list(range(10)), 0.8)
    assert train == list(range(8)) and val == [8, 9]


def test_save_load_round_trip(tmp_path):
    corpus = generate_corpus(2, {"plain": 1.0}, seed=1, height=16, width=16, n_frames=3)
    save_corpus(corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert [s.seq_id for s in back] == [s.seq_id for s in corpus]
    for a, b in zip(corpus, back):
        np.testing.assert_allclose(a.frames, b.frames, atol=0.5 / 255 + 1e-6)
        np.testing.assert_array_equal(a.masks, b.masks)
        np.testing.assert_array_equal(a.flows_fw, b.flows_fw)
        assert a.spec == b.spec
