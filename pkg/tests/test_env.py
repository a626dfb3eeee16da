import itertools

import numpy as np
import pytest

from symdis.env import (
    DatasetError,
    DialsRenderer,
    FlatlandRenderer,
    OneHotRenderer,
    RenderError,
    TensorFileError,
    gen_full_transitions,
    load_dataset,
    ood_rightmost_split,
    ood_split,
    read_tensor,
    renderer_from_json,
    save_dataset,
    subsample_iid,
    write_tensor,
)
from symdis.group_core import (
    GroupSpec,
    WorldState,
    apply,
    catalog_from_factor_actions,
    cyclic,
    symmetric,
)

RGB = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]


def flc():
    spec = GroupSpec((cyclic(5), cyclic(5), cyclic(3)))
    cat = catalog_from_factor_actions(spec, [[1, 4], [1, 4], [1, 2]], M=2)
    return spec, cat


def dials2():
    spec = GroupSpec((symmetric(2), cyclic(7), cyclic(5)))
    cat = catalog_from_factor_actions(spec, [[(1, 0)], [1, 6], [1, 4]], M=2)
    return spec, cat


def test_onehot_basis_vector():
    spec = GroupSpec((cyclic(4),))
    r = OneHotRenderer(spec)
    out = r.render(spec.state_from_index(2))
    assert np.array_equal(out.data, [0, 0, 1, 0])
    assert out.shape == (4,)


def test_flatland_deterministic():
    spec, _ = flc()
    r = FlatlandRenderer(spec, image_px=16, colors=RGB)
    w = WorldState(spec, (2, 3, 1))
    a = r.render(w).data
    b = r.render(w).data
    assert a.tobytes() == b.tobytes()


def test_flatland_injective_exhaustive():
    spec, _ = flc()
    r = FlatlandRenderer(spec, image_px=16, colors=RGB)
    images = [r.render_index(i).tobytes() for i in range(spec.order)]
    assert len(images) == 75
    for a, b in itertools.combinations(range(75), 2):
        assert images[a] != images[b]


def test_flatland_values_in_unit_range():
    spec, _ = flc()
    r = FlatlandRenderer(spec, image_px=16, colors=RGB)
    for i in range(spec.order):
        img = r.render_index(i)
        assert np.all(img >= 0) and np.all(img <= 1) and np.all(np.isfinite(img))


def test_flatland_permutation_colors():
    spec = GroupSpec((cyclic(5), cyclic(5), symmetric(3)))
    r = FlatlandRenderer(spec, image_px=16)
    assert r.spec.order == 150
    # injectivity checked at construction; spot check two color coords differ
    a = r.render(WorldState(spec, (0, 0, (0, 1, 2)))).data
    b = r.render(WorldState(spec, (0, 0, (1, 0, 2)))).data
    assert a.tobytes() != b.tobytes()


def test_flatland_overlap_rejected():
    spec, _ = flc()
    with pytest.raises(RenderError):
        FlatlandRenderer(spec, image_px=16, colors=RGB, disk_radius_px=4)


def test_dials_injective_and_pure():
    spec, _ = dials2()
    r = DialsRenderer(spec, image_px=12)
    imgs = {r.render_index(i).tobytes() for i in range(spec.order)}
    assert len(imgs) == 70
    i0 = r.render_index(13)
    assert i0.tobytes() == r.render_index(13).tobytes()


def test_render_spec_mismatch():
    spec, _ = flc()
    other = GroupSpec((cyclic(3),))
    r = OneHotRenderer(other)
    with pytest.raises(RenderError):
        r.render(WorldState(spec, (0, 0, 0)))


def test_full_transitions_counts_flc():
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    assert ds.transitions.shape == (450, 3)
    assert ds.observations.shape == (75, 75)


def test_full_transitions_tiny():
    spec = GroupSpec((cyclic(2),))
    cat = catalog_from_factor_actions(spec, [[1]], M=2)
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    assert ds.transitions.shape[0] == 2


def test_full_transitions_counts_dials2():
    spec, cat = dials2()
    ds = gen_full_transitions(spec, cat, DialsRenderer(spec, image_px=12))
    assert ds.transitions.shape[0] == 70 * 5 == 350


def test_transition_consistency_exhaustive():
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    for s, a, d in ds.transitions:
        w = spec.state_from_index(int(s))
        assert spec.state_index(apply(cat.element(int(a)), w)) == int(d)


def test_subsample_full_is_identity():
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    sub = subsample_iid(ds, len(cat), seed=3)
    assert np.array_equal(sub.transitions, ds.transitions)


def test_subsample_counts_and_determinism():
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    a = subsample_iid(ds, 2, seed=9)
    b = subsample_iid(ds, 2, seed=9)
    assert a.transitions.shape[0] == 150
    assert np.array_equal(a.transitions, b.transitions)
    c = subsample_iid(ds, 2, seed=10)
    assert not np.array_equal(a.transitions, c.transitions)
    # per state: exactly 2 distinct actions
    for s in range(75):
        acts = a.transitions[a.transitions[:, 0] == s][:, 1]
        assert len(acts) == 2 and len(set(acts.tolist())) == 2


def test_subsample_range_errors():
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    with pytest.raises(DatasetError):
        subsample_iid(ds, 0, seed=1)
    with pytest.raises(DatasetError):
        subsample_iid(ds, 7, seed=1)


def test_ood_split_partition():
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    train, held = ood_split(ds, {0, 1})
    assert train.transitions.shape[0] + held.transitions.shape[0] == ds.transitions.shape[0]
    assert set(train.transitions[:, 1].tolist()) == {0, 1}
    assert not set(held.transitions[:, 1].tolist()) & {0, 1}
    merged = np.concatenate([train.transitions, held.transitions])
    assert sorted(map(tuple, merged.tolist())) == sorted(map(tuple, ds.transitions.tolist()))

    all_train, empty = ood_split(ds, set(range(6)))
    assert empty.transitions.shape[0] == 0
    assert np.array_equal(all_train.transitions, ds.transitions)

    with pytest.raises(DatasetError):
        ood_split(ds, set())


def test_ood_rightmost_split():
    spec, cat = dials2()
    ds = gen_full_transitions(spec, cat, DialsRenderer(spec, image_px=12))
    train, held = ood_rightmost_split(ds)
    # permutation transitions all stay in train
    perm_rows = ds.transitions[ds.transitions[:, 1] == 0]
    assert all(tuple(r) in set(map(tuple, train.transitions.tolist())) for r in perm_rows.tolist())
    # every action id keeps some training coverage
    assert set(train.transitions[:, 1].tolist()) == {0, 1, 2, 3, 4}
    # held-out rotations act on the object away from the right tile
    n = spec.factors[0].n
    for s, a, d in held.transitions:
        nz = cat.element(int(a)).nontrivial_factors()
        assert len(nz) == 1 and nz[0] >= 1
        slots = spec.state_from_index(int(s)).coords[0]
        assert slots[n - 1] != nz[0] - 1
    assert train.transitions.shape[0] + held.transitions.shape[0] == 350


def test_tensor_roundtrip(tmp_path):
    path = tmp_path / "t.gmat"
    data = np.zeros(6, dtype=np.float32)
    write_tensor(path, data, [2, 3])
    back, dims = read_tensor(path)
    assert dims == [2, 3]
    assert back.tobytes() == data.tobytes()


def test_tensor_roundtrip_bit_exact_random(tmp_path):
    rng = np.random.default_rng(5)
    data = rng.standard_normal(24).astype(np.float32)
    path = tmp_path / "r.gmat"
    write_tensor(path, data, [2, 3, 4])
    back, dims = read_tensor(path)
    assert dims == [2, 3, 4]
    assert back.tobytes() == data.tobytes()


def test_tensor_scalar_file(tmp_path):
    path = tmp_path / "s.gmat"
    write_tensor(path, np.array([3.5], dtype=np.float32), [])
    back, dims = read_tensor(path)
    assert dims == [] and back.shape == (1,) and back[0] == 3.5


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.gmat"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_tensor_truncated(tmp_path):
    path = tmp_path / "t.gmat"
    write_tensor(path, np.zeros(6, dtype=np.float32), [2, 3])
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_tensor_length_mismatch(tmp_path):
    with pytest.raises(TensorFileError):
        write_tensor(tmp_path / "x.gmat", np.zeros(5, dtype=np.float32), [2, 3])


def test_dataset_directory_roundtrip(tmp_path):
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, FlatlandRenderer(spec, image_px=16, colors=RGB))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.observations.tobytes() == ds.observations.tobytes()
    assert np.array_equal(back.transitions, ds.transitions)
    assert back.catalog == ds.catalog
    assert back.spec == spec


def test_save_dataset_deterministic_bytes(tmp_path):
    spec, cat = flc()
    ds = gen_full_transitions(spec, cat, OneHotRenderer(spec))
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    for name in ("observations.gmat", "transitions.csv", "catalog.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_renderer_json_roundtrip():
    spec, _ = flc()
    r = FlatlandRenderer(spec, image_px=16, colors=RGB)
    r2 = renderer_from_json(spec, r.to_json())
    assert r2.render_index(11).tobytes() == r.render_index(11).tobytes()
