import pytest
import torch

from performsinger import numerics as nx
from performsinger.encoders import (
    EncoderInputError,
    PhonemeEncoder,
    PitchEncoder,
    SpeakerEncoder,
    VisualEncoder,
    combine_content,
    pitch_ids,
)
from performsinger.frontend.inventory import REST
from performsinger.vcfm import VCFM, Adapter, FusionBlock


def rnd(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=nx.DTYPE)


def test_phoneme_encoder_shapes_and_padding(tiny_cfg):
    torch.manual_seed(0)
    enc = PhonemeEncoder(tiny_cfg).double().eval()
    ids = torch.tensor([[3, 5, 7, 0, 0]])
    out = enc(ids)
    assert out.shape == (1, 5, 16)
    assert torch.isfinite(out).all()
    with pytest.raises(EncoderInputError):
        enc(torch.zeros(1, 0, dtype=torch.long))
    with pytest.raises(EncoderInputError):
        enc(torch.tensor([[999]]))


def test_pitch_ids_and_encoder(tiny_cfg):
    ids = pitch_ids([36, 79, REST, 60])
    assert ids.tolist() == [1, 44, 45, 25]
    pe = PitchEncoder(tiny_cfg).double()
    assert pe(ids[None]).shape == (1, 4, 16)
    with pytest.raises(EncoderInputError):
        pitch_ids([35])


def test_combine_content_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        combine_content(rnd(1, 3, 4), rnd(1, 4, 4))


def test_speaker_encoder_unit_norm_and_min_frames(tiny_cfg):
    spk = SpeakerEncoder(tiny_cfg).double()
    e = spk(rnd(2, 12, 80))
    assert e.shape == (2, 16)
    assert torch.allclose(e.norm(dim=-1), torch.ones(2, dtype=nx.DTYPE))
    with pytest.raises(EncoderInputError):
        spk(rnd(1, 5, 80))


def test_visual_encoder_one_row_per_frame(tiny_cfg):
    vis = VisualEncoder(tiny_cfg).double()
    assert vis(torch.rand(1, 7, 48, 48, dtype=nx.DTYPE)).shape == (1, 7, 16)
    with pytest.raises(EncoderInputError):
        vis(torch.rand(1, 7, 32, 32, dtype=nx.DTYPE))


# ---------------------------------------------------------------------- VCFM


@pytest.mark.parametrize("k", [0, 1, 2, 4])
def test_zero_init_is_identity(k):
    torch.manual_seed(k)
    vcfm = VCFM(16, blocks=k, heads=2, zero_init=True).double()
    cf, vf = rnd(1, 6, 16), rnd(1, 9, 16, seed=1)
    assert torch.equal(vcfm(cf, vf), cf)


def test_visual_adapter_applied_once_regardless_of_depth():
    vcfm = VCFM(16, blocks=3).double()
    vcfm(rnd(1, 4, 16), rnd(1, 5, 16))
    assert vcfm.adapter_calls == 1
    empty = VCFM(16, blocks=0).double()
    empty(rnd(1, 4, 16), rnd(1, 5, 16))
    assert empty.adapter_calls == 0


def test_fusion_changes_content_once_trained():
    torch.manual_seed(0)
    block = FusionBlock(16, 2, zero_init=False).double()
    cf = rnd(1, 4, 16)
    assert not torch.equal(block(cf, rnd(1, 5, 16)), cf)


def test_fusion_output_length_follows_content():
    block = FusionBlock(16, 2, zero_init=False).double()
    assert block(rnd(1, 4, 16), rnd(1, 11, 16)).shape == (1, 4, 16)


def test_adapter_rejects_wrong_width():
    with pytest.raises(nx.ShapeError):
        Adapter(8).double()(rnd(1, 2, 6))
