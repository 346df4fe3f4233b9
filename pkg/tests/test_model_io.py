import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import all_kinds_graph
from filterbasis import zoo
from filterbasis.model_io import (
    MAGIC,
    BlobFormatError,
    BlobLengthError,
    DanglingBlobError,
    DatasetError,
    EmptyDatasetError,
    ShapeChainError,
    VersionError,
    decode_blob,
    encode_blob,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    sharing_from_dict,
    sharing_to_dict,
)
from filterbasis.pipeline import attach_plan, decompose_graph, make_plan
from filterbasis.sharing import plan_network_sharing_dense
from filterbasis.trainer import export_for_inference


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def test_blob_header_layout():
    data = encode_blob(np.zeros((32, 8, 3, 3)))
    assert data[:8] == MAGIC
    assert data[8] == 1
    assert struct.unpack("<I", data[9:13]) == (4,)
    assert struct.unpack("<4I", data[13:29]) == (32, 8, 3, 3)
    assert struct.unpack("<Q", data[29:37]) == (32 * 8 * 9 * 4,)
    assert len(data) == 37 + 32 * 8 * 9 * 4


@settings(max_examples=50, deadline=None)
@given(shape=st.lists(st.integers(0, 5), min_size=0, max_size=4), seed=st.integers(0, 10**6))
def test_blob_roundtrip(shape, seed):
    a = np.random.default_rng(seed).standard_normal(shape)
    out = decode_blob(encode_blob(a))
    assert out.shape == a.shape
    np.testing.assert_array_equal(out, f32(a))


def test_blob_errors():
    data = encode_blob(np.ones((2, 3)))
    with pytest.raises(BlobLengthError, match="w1"):
        decode_blob(data[:-1], "w1")
    with pytest.raises(BlobFormatError):
        decode_blob(b"XXXXXXXX" + data[8:])
    with pytest.raises(BlobLengthError):
        decode_blob(data + b"\0")
    bad = bytearray(data)
    bad[8] = 7
    with pytest.raises(BlobFormatError, match="dtype"):
        decode_blob(bytes(bad))
    lying = data[:21] + struct.pack("<Q", 4) + data[29:]
    with pytest.raises(BlobLengthError, match="declared"):
        decode_blob(lying)


def test_model_roundtrip(tmp_path):
    g, _ = all_kinds_graph()
    save_model(g, tmp_path / "a")
    back = load_model(tmp_path / "a")
    save_model(back, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    for name, arr in g.params.items():
        np.testing.assert_array_equal(back.params[name], f32(arr))
        assert (tmp_path / f"a/blobs/{name}.blob").read_bytes() == (tmp_path / f"b/blobs/{name}.blob").read_bytes()
    assert [l.kind for l in back.layers] == [l.kind for l in g.layers]


def test_save_is_byte_deterministic(tmp_path):
    g = zoo.resnet_toy()
    save_model(g, tmp_path / "a")
    save_model(g, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_manifest_is_sorted_json(tmp_path):
    save_model(zoo.residual_blocks(4, 1, 4), tmp_path)
    text = (tmp_path / "manifest.json").read_text()
    m = json.loads(text)
    assert m["format"] == "filterbasis-model" and m["version"] == "1.0"
    assert text == json.dumps(m, indent=2, sort_keys=True) + "\n"


def test_truncated_blob_names_it(tmp_path):
    save_model(zoo.residual_blocks(4, 1, 4), tmp_path)
    path = tmp_path / "blobs/block0.conv1.weight.blob"
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(BlobLengthError, match="block0.conv1.weight"):
        load_model(tmp_path)


def test_dangling_blob(tmp_path):
    save_model(zoo.residual_blocks(4, 1, 4), tmp_path)
    (tmp_path / "blobs/block0.conv0.weight.blob").unlink()
    with pytest.raises(DanglingBlobError, match="block0.conv0.weight"):
        load_model(tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    del m["blobs"]["block0.conv0.weight"]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DanglingBlobError):
        load_model(tmp_path)


def test_version_mismatch(tmp_path):
    save_model(zoo.residual_blocks(4, 1, 4), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["version"] = "2.0"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionError):
        load_model(tmp_path)
    m["version"] = "1.7"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    load_model(tmp_path)


def test_shape_chain_failure(tmp_path):
    save_model(zoo.residual_blocks(4, 1, 4), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["input_shape"] = [3, 4, 4]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ShapeChainError):
        load_model(tmp_path)


def test_errors_are_distinct_types():
    kinds = [VersionError, DanglingBlobError, ShapeChainError, BlobLengthError]
    assert len({k for k in kinds}) == 4
    assert not issubclass(DanglingBlobError, VersionError)


def test_plans_roundtrip():
    g = zoo.growing_toy(layers=3, growth=2, c0=2, chained=False)
    plan = plan_network_sharing_dense(g, 3, 4)
    assert sharing_from_dict(json.loads(json.dumps(sharing_to_dict(plan)))) == plan


def test_exported_model_omits_references(tmp_path):
    g = zoo.residual_blocks(4, 2, 4)
    c = decompose_graph(attach_plan(g, make_plan(g, 3, 2, "block")))
    save_model(c, tmp_path / "c")
    save_model(export_for_inference(c), tmp_path / "e")
    before = set(json.loads((tmp_path / "c/manifest.json").read_text())["blobs"])
    after = set(json.loads((tmp_path / "e/manifest.json").read_text())["blobs"])
    assert before - after == {f"{l.name}.reference" for l in c.decomposed_layers()}
    assert not list((tmp_path / "e/blobs").glob("*.reference.blob"))


# ---------------------------------------------------------------- datasets

def test_dataset_batches(tmp_path):
    x = np.arange(10.0).reshape(10, 1)
    save_dataset(tmp_path / "d.bin", x, 2 * x)
    ds = load_dataset(tmp_path / "d.bin", batch_size=4)
    batches = ds.batches(seed=3)
    assert [len(b[0]) for b in batches] == [4, 4, 2]
    np.testing.assert_array_equal(np.concatenate([b[1] for b in batches]),
                                  2 * np.concatenate([b[0] for b in batches]))
    again = load_dataset(tmp_path / "d.bin", batch_size=4).batches(seed=3)
    for (a, _), (b, _) in zip(batches, again):
        np.testing.assert_array_equal(a, b)


def test_dataset_errors(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(EmptyDatasetError):
        load_dataset(tmp_path / "empty")
    (tmp_path / "half").write_bytes(encode_blob(np.ones((3, 2))))
    with pytest.raises(DatasetError, match="targets"):
        load_dataset(tmp_path / "half")
    (tmp_path / "pair").write_bytes(encode_blob(np.ones((3, 2))) + encode_blob(np.ones((2, 2))))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "pair")
    with pytest.raises(DatasetError):
        save_dataset(tmp_path / "x", np.ones((3, 1)), np.ones((2, 1)))
