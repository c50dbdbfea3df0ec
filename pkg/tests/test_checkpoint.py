import numpy as np
import pytest

from treelm.checkpoint import load_checkpoint, read_header, save_checkpoint
from treelm.deptree import DepTree
from treelm.errors import DataError
from treelm.model import ModelConfig, build_model


def small_model(variant="ldtreelstm", seed=0):
    cfg = ModelConfig(variant=variant, vocab_size=13, d=6, layers=2, dropout=0.25)
    return build_model(cfg, np.random.default_rng(seed))


def test_roundtrip_bit_exact(tmp_path):
    model = small_model()
    path = tmp_path / "ckpt"
    save_checkpoint(path, model, vocab_hash="abc123")
    loaded, header = load_checkpoint(path)
    assert header["kind"] == "ldtreelstm"
    assert header["vocab_sha256"] == "abc123"
    src, dst = model.params(), loaded.params()
    assert src.keys() == dst.keys()
    for k in src:
        np.testing.assert_array_equal(src[k], dst[k])
    assert loaded.cfg.to_dict() == model.cfg.to_dict()


def test_roundtrip_preserves_scores(tmp_path):
    model = small_model()
    tree = DepTree.from_rows(["a", "b", "c"], [2, 0, 2]).with_word_ids([3, 4, 5])
    save_checkpoint(tmp_path / "m", model)
    loaded, _ = load_checkpoint(tmp_path / "m")
    assert loaded.log_prob(tree) == model.log_prob(tree)


def test_saving_twice_is_deterministic(tmp_path):
    model = small_model()
    save_checkpoint(tmp_path / "a", model, vocab_hash="x")
    save_checkpoint(tmp_path / "b", model, vocab_hash="x")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_f4_storage_lossy_but_loadable(tmp_path):
    model = small_model()
    save_checkpoint(tmp_path / "m32", model, dtype="f4")
    loaded, header = load_checkpoint(tmp_path / "m32")
    assert header["tensors"][0]["dtype"] == "f4"
    np.testing.assert_allclose(loaded.emb, model.emb, atol=1e-6)


def test_magic_check(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(DataError):
        read_header(bad)


def test_manifest_has_offsets_and_shapes(tmp_path):
    model = small_model("treelstm")
    save_checkpoint(tmp_path / "m", model)
    header, _ = read_header(tmp_path / "m")
    names = [t["name"] for t in header["tensors"]]
    assert names == sorted(names)
    offsets = [t["offset"] for t in header["tensors"]]
    assert offsets[0] == 0 and all(b > a for a, b in zip(offsets, offsets[1:]))
    by_name = {t["name"]: t for t in header["tensors"]}
    assert tuple(by_name["emb"]["shape"]) == model.emb.shape
