import numpy as np
import pytest
import torch

from maskguide.errors import InvalidInputError
from maskguide.models import (
    DENSENET169, ModelState, build_model, load_checkpoint, parameter_count, save_checkpoint,
)


def test_compact_forward_shapes():
    m = build_model("compact", seed=0)
    x = torch.zeros(2, 1, 64, 64, 32)
    z = m.net(x)
    assert z.shape == (2, 2)
    assert torch.allclose(torch.softmax(z, 1).sum(1), torch.ones(2, dtype=z.dtype), atol=1e-6)
    assert parameter_count(m) < 50_000


def test_toy_is_small():
    assert parameter_count(build_model("toy")) <= 1000


def test_densenet169_preset_width():
    # constructing the full preset is cheap; only the forward pass would be slow
    m = build_model(DENSENET169, seed=0)
    assert m.net.fc.in_features == 1664
    assert m.target_layer == "final_norm"


def test_seeded_build_is_deterministic_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model("compact", seed=4)
    after = torch.rand(1)
    b = build_model("compact", seed=4)
    assert torch.equal(a.flat_parameters(), b.flat_parameters())
    assert torch.equal(before, after)  # global generator untouched


def test_unknown_target_layer():
    m = build_model("toy")
    with pytest.raises(InvalidInputError):
        ModelState(m.net, "nope", m.descriptor)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_bit_exact(tmp_path, dtype):
    m = build_model("compact", seed=9, dtype=dtype)
    with torch.no_grad():
        for p in m.net.parameters():
            p.add_(torch.randn_like(p) * 1e-3)
    save_checkpoint(m, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    for (ka, va), (kb, vb) in zip(m.net.state_dict().items(), back.net.state_dict().items()):
        assert ka == kb and va.dtype == vb.dtype
        assert va.numpy().tobytes() == vb.numpy().tobytes()
    assert back.target_layer == m.target_layer and back.descriptor == m.descriptor


def test_checkpoint_detects_tampering(tmp_path):
    m = build_model("toy")
    save_checkpoint(m, tmp_path)
    blob = bytearray((tmp_path / "params.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(InvalidInputError, match="checksum"):
        load_checkpoint(tmp_path)
