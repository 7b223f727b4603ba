import numpy as np
import pytest
import torch

from onestep_vton import checkpoint as cp


def test_checkpoint_roundtrip_exact(tmp_path):
    tensors = {
        "net.w": torch.randn(3, 4, 5),
        "net.b": torch.randn(7),
        "ema.net.w": torch.randn(3, 4, 5),
    }
    path = tmp_path / "c.ckpt"
    cp.save_checkpoint(path, tensors, config={"seed": 3}, extra={"stage": "warp"})
    loaded = cp.load_checkpoint(path)
    assert loaded.config == {"seed": 3}
    assert loaded.extra == {"stage": "warp"}
    for name, t in tensors.items():
        assert torch.equal(loaded.tensors[name], t)


def test_checkpoint_bytes_deterministic(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3)}
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    cp.save_checkpoint(p1, tensors, config={"x": 1})
    cp.save_checkpoint(p2, tensors, config={"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_blob_is_little_endian_row_major(tmp_path):
    import json
    import zipfile

    t = torch.arange(12, dtype=torch.float32).reshape(3, 4)
    path = tmp_path / "c.ckpt"
    cp.save_checkpoint(path, {"t": t})
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("tensors.bin")
    entry = manifest["tensors"][0]
    assert entry == {"name": "t", "shape": [3, 4], "dtype": "float32",
                     "offset": 0, "nbytes": 48}
    raw = np.frombuffer(blob, dtype="<f4").reshape(3, 4)
    assert np.array_equal(raw, t.numpy())


def test_checkpoint_rejects_foreign_file(tmp_path):
    import zipfile

    path = tmp_path / "weird.zip"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", '{"format": "something-else", "tensors": []}')
        zf.writestr("tensors.bin", b"")
    with pytest.raises(ValueError, match="not a"):
        cp.load_checkpoint(path)


def test_named_subset_and_module_roundtrip(tmp_path):
    net = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.Linear(8, 2))
    tensors = cp.module_tensors(net, "gen.")
    path = tmp_path / "m.ckpt"
    cp.save_checkpoint(path, tensors)
    loaded = cp.load_checkpoint(path)
    twin = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.Linear(8, 2))
    cp.load_into_module(twin, loaded.named_subset("gen."))
    x = torch.randn(3, 4)
    assert torch.equal(net(x), twin(x))


def test_load_into_module_reports_missing(tmp_path):
    net = torch.nn.Linear(4, 4)
    with pytest.raises(ValueError, match="missing"):
        cp.load_into_module(net, {"weight": torch.zeros(4, 4)})
