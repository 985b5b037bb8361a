import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclsim.data import (
    AugmentPolicy,
    DataConfigError,
    Dataset,
    DatasetParseError,
    Example,
    Trigger,
    augment,
    augment_batch,
    default_trigger,
    embed_trigger,
    embed_trigger_pixels,
    generate_synthetic,
    load_dataset,
    parse_dataset,
    partition,
    quantize,
    save_dataset,
)
from fclsim.numcore import RngStream


def test_noise_free_classes_are_constant():
    ds = generate_synthetic(3, 5, noise=0.0, seed=1)
    for c in range(3):
        px = ds.of_class(c).pixels
        assert np.all(px == px[0])


def test_generation_is_deterministic():
    assert generate_synthetic(4, 10, seed=5) == generate_synthetic(4, 10, seed=5)
    assert generate_synthetic(4, 10, seed=5) != generate_synthetic(4, 10, seed=6)


def test_one_nn_on_raw_pixels_is_perfect():
    ds = generate_synthetic(4, 40, class_separation=8.0, noise=0.1, seed=3)
    train, test = ds.split(0.5)
    a = train.pixels.reshape(len(train), -1)
    b = test.pixels.reshape(len(test), -1)
    d = ((b[:, None, :] - a[None, :, :]) ** 2).sum(-1)
    pred = train.labels[np.argmin(d, axis=1)]
    assert np.all(pred == test.labels)


def test_shape_too_small():
    with pytest.raises(DataConfigError):
        generate_synthetic(2, 2, shape=(1, 7, 16))
    with pytest.raises(DataConfigError):
        generate_synthetic(1, 2)


def test_pixels_in_unit_range():
    ds = generate_synthetic(3, 20, class_separation=40.0, noise=1.0, seed=0)
    assert ds.pixels.min() >= 0.0 and ds.pixels.max() <= 1.0


def test_file_round_trip(tmp_path):
    ds = generate_synthetic(3, 4, seed=2)
    save_dataset(ds, tmp_path / "d.fcld")
    assert load_dataset(tmp_path / "d.fcld") == quantize(ds)
    unl = ds.unlabeled()
    save_dataset(unl, tmp_path / "u.fcld")
    back = load_dataset(tmp_path / "u.fcld")
    assert back.labels is None and np.array_equal(back.pixels, quantize(unl).pixels)


def test_empty_file_is_bad_magic(tmp_path):
    p = tmp_path / "empty"
    p.write_bytes(b"")
    with pytest.raises(DatasetParseError, match="bad magic") as exc:
        load_dataset(p)
    assert exc.value.offset == 0


def test_truncated_body(tmp_path):
    ds = generate_synthetic(2, 5, seed=0)
    save_dataset(ds, tmp_path / "d")
    raw = (tmp_path / "d").read_bytes()
    per_image = 3 * 16 * 16
    # drop the last image and the labels: header still says 10
    with pytest.raises(DatasetParseError, match="truncated") as exc:
        parse_dataset(raw[:16 + 9 * per_image])
    assert exc.value.offset == 16 + 9 * per_image


def test_shape_overflow_and_trailing_bytes():
    import struct

    header = struct.pack("<4sHIBHHB", b"FCLD", 1, 0xFFFFFFFF, 255, 0xFFFF, 0xFFFF, 0)
    with pytest.raises(DatasetParseError, match="overflow"):
        parse_dataset(header)
    ds = generate_synthetic(2, 1, seed=0)
    good = struct.pack("<4sHIBHHB", b"FCLD", 1, 2, 3, 16, 16, 0) + np.zeros(2 * 768, np.uint8).tobytes()
    assert len(parse_dataset(good)) == 2
    with pytest.raises(DatasetParseError):
        parse_dataset(good + b"x")
    assert len(ds) == 2


def test_empty_policy_is_identity():
    x = Example(generate_synthetic(2, 1, seed=0).pixels[0], 0)
    out = augment(x, RngStream(1), AugmentPolicy())
    assert np.array_equal(out.pixels, x.pixels)


def test_augment_deterministic_per_stream():
    x = Example(generate_synthetic(2, 1, seed=0).pixels[0], 0)
    pol = AugmentPolicy.simclr()
    assert np.array_equal(augment(x, RngStream(1, 4), pol).pixels, augment(x, RngStream(1, 4), pol).pixels)


def test_distinct_streams_give_distinct_views():
    x = Example(generate_synthetic(2, 1, seed=0).pixels[0], 0)
    pol = AugmentPolicy.simclr()
    collisions = sum(
        np.array_equal(augment(x, RngStream(7, 2 * i), pol).pixels, augment(x, RngStream(7, 2 * i + 1), pol).pixels)
        for i in range(100)
    )
    assert collisions <= 1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 1.0), st.booleans(), st.floats(0, 0.5), st.floats(0, 0.9), st.integers(0, 1000))
def test_augment_preserves_shape_and_range(crop, flip, noise, bright, seed):
    px = generate_synthetic(2, 2, seed=seed).pixels
    pol = AugmentPolicy(crop_scale=(crop, 1.0), flip=flip, noise_sigma=noise, brightness=bright)
    out = augment_batch(px, RngStream(seed).generator(), pol)
    assert out.shape == px.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_embed_white_patch_on_black():
    black = np.zeros((3, 16, 16))
    trig = Trigger(np.ones((3, 3, 3)), (0, 0))
    out = embed_trigger(Example(black, None), trig)
    assert int((out.pixels == 1.0).sum()) == 27
    assert int((out.pixels == 0.0).sum()) == 3 * 256 - 27
    assert np.all(black == 0.0)


def test_embed_idempotent_and_local():
    px = generate_synthetic(2, 3, seed=1).pixels
    trig = default_trigger((3, 16, 16), corner="top_right", side=4)
    once = embed_trigger_pixels(px, trig)
    assert np.array_equal(once, embed_trigger_pixels(once, trig))
    mask = np.ones_like(px, dtype=bool)
    mask[..., 0:4, 12:16] = False
    assert np.array_equal(once[mask], px[mask])
    assert np.all(once[..., 0:4, 12:16] == 1.0)


def test_default_trigger_geometry():
    t = default_trigger((3, 16, 16))
    assert t.patch.shape == (3, 2, 2) and t.position == (14, 14)
    with pytest.raises(DataConfigError):
        Trigger(np.ones((3, 4, 4)), (14, 14)).check_fits((3, 16, 16))
    with pytest.raises(DataConfigError):
        default_trigger((3, 16, 16), corner="middle")


def test_partition_single_client():
    ds = generate_synthetic(3, 5, seed=0)
    parts = partition(ds, 1)
    assert np.array_equal(parts[0], np.arange(15))


def test_partition_iid_sizes():
    ds = generate_synthetic(10, 100, seed=0)
    parts = partition(ds, 10, "iid", seed=3)
    assert all(len(p) == 100 for p in parts.values())
    assert np.array_equal(np.sort(np.concatenate(list(parts.values()))), np.arange(1000))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.sampled_from(["iid", "dirichlet"]), st.integers(0, 10 ** 6))
def test_partition_disjoint_cover(n_clients, kind, seed):
    ds = generate_synthetic(4, 15, seed=1)
    parts = partition(ds, n_clients, kind, seed=seed)
    joined = np.concatenate(list(parts.values()))
    assert len(parts) == n_clients
    assert all(len(p) > 0 for p in parts.values())
    assert np.array_equal(np.sort(joined), np.arange(len(ds)))


def test_dirichlet_is_less_even_than_iid():
    ds = generate_synthetic(10, 50, seed=0)

    def max_entropy(parts):
        ent = []
        for idx in parts.values():
            p = np.bincount(ds.labels[idx], minlength=10) / len(idx)
            p = p[p > 0]
            ent.append(-(p * np.log(p)).sum())
        return max(ent)

    iid = np.mean([max_entropy(partition(ds, 10, "iid", seed=s)) for s in range(50)])
    dirichlet = np.mean([max_entropy(partition(ds, 10, "dirichlet", seed=s)) for s in range(50)])
    assert dirichlet < iid


def test_dirichlet_needs_labels():
    ds = generate_synthetic(3, 5, seed=0).unlabeled()
    with pytest.raises(DataConfigError):
        partition(ds, 2, "dirichlet")


def test_dataset_validates_labels():
    with pytest.raises(DataConfigError):
        Dataset(np.zeros((2, 3, 8, 8)), np.array([0, 3]), 3)
