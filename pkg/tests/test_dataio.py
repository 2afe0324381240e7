import numpy as np
import pytest

from blurdecomp import dataio
from blurdecomp import guidance as g
from blurdecomp import scenegen as sg


@pytest.fixture
def triplet():
    sprite = sg.SpriteSpec(shape="disk", size=9, velocity=(0.3, 0.1), start=(10.0, 18.0), texture_seed=4)
    config = sg.SceneConfig(height=40, width=40, sprites=[sprite], background_seed=9, n_frames=48)
    frames, flows = sg.generate_scene(config, seed=0)
    gconf = g.GuidanceConfig(num_directions=4, static_threshold=1.0)
    return sg.build_triplet(frames, flows, 5, gconf)


def test_triplet_roundtrip(tmp_path, triplet):
    scene_dir = tmp_path / "train" / "scene_0000"
    dataio.save_triplet(str(scene_dir), triplet, meta={"seed": 0})
    loaded, meta = dataio.load_triplet(str(scene_dir))

    assert meta["seed"] == 0
    assert meta["gamma"] == triplet.blurry.gamma
    assert loaded.guidance.config == triplet.guidance.config
    assert np.array_equal(loaded.guidance.labels, triplet.guidance.labels)
    # flows are exact; images carry 8-bit quantization
    for a, b in zip(loaded.flows, triplet.flows):
        assert np.array_equal(a.flow, b.flow)
    assert np.abs(loaded.blurry.image - triplet.blurry.image).max() <= 0.5 / 255.0 + 1e-6
    assert np.abs(loaded.sharp.frames - triplet.sharp.frames).max() <= 0.5 / 255.0 + 1e-6
    assert loaded.blurry.source_count == triplet.blurry.source_count


def test_image_roundtrip_is_byte_stable(tmp_path, rng):
    img = rng.random((20, 24, 3)).astype(np.float32)
    path = str(tmp_path / "x.png")
    dataio.save_image(path, img)
    first = dataio.load_image(path)
    dataio.save_image(path, first)
    second = dataio.load_image(path)
    assert np.array_equal(first, second)


def test_flows_reject_bad_magic(tmp_path, triplet):
    path = str(tmp_path / "flows.bin")
    dataio.save_flows(path, triplet.flows)
    raw = bytearray(open(path, "rb").read())
    raw[0] ^= 0xFF
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        dataio.load_flows(path)


def test_flows_reject_truncation(tmp_path, triplet):
    path = str(tmp_path / "flows.bin")
    dataio.save_flows(path, triplet.flows)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        dataio.load_flows(path)


def test_load_split_orders_scenes(tmp_path, triplet):
    for name in ("scene_0002", "scene_0000", "scene_0001"):
        dataio.save_triplet(str(tmp_path / "val" / name), triplet)
    triplets, metas = dataio.load_split(str(tmp_path), "val")
    assert len(triplets) == 3
    assert dataio.list_scenes(str(tmp_path / "val"))[0].endswith("scene_0000")
    assert dataio.load_split(str(tmp_path), "missing") == ([], [])
