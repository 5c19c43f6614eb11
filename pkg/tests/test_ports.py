import numpy as np
import pytest

from inpaintad.errors import ParameterError
from inpaintad.ports import (
    BiasDenoiser,
    HashTextEncoder,
    IdentityCodec,
    IdentityPerceptual,
    MultiScalePerceptual,
    PooledFeatureExtractor,
    StoredNoiseDenoiser,
    load_channel_weights,
    oracle_inpainter,
    validate_ports,
)


def test_identity_codec_roundtrip_exact(rng):
    codec = IdentityCodec()
    img = rng.uniform(0, 1, (512, 512, 3))
    z = codec.encode(img)
    assert z.data.shape == (3, 512, 512) and z.timestep == 0
    assert np.array_equal(codec.decode(z), img)


def test_validate_ports_all_green():
    report = validate_ports(IdentityCodec(), BiasDenoiser(latent_channels=3), HashTextEncoder())
    assert report.ok, [p.detail for p in report.failures()]


def test_denoiser_channel_probe_arithmetic():
    # a 4-channel latent implies 4 + 4 + 1 = 9 denoiser input channels
    class FourChannelCodec:
        scale_factor = 2
        latent_channels = 4

        def encode(self, image):
            from inpaintad.schedule import LatentArray
            h, w = image.shape[:2]
            pooled = image.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
            data = np.concatenate([pooled.transpose(2, 0, 1),
                                   pooled.mean(axis=2)[None]], axis=0)
            return LatentArray(data, 0)

        def decode(self, z):
            from inpaintad.imageops import resize_nearest
            return resize_nearest(z.data[:3], (z.data.shape[1] * 2, z.data.shape[2] * 2)).transpose(1, 2, 0)

    codec = FourChannelCodec()
    codec.roundtrip_tolerance = 1.0   # lossy mock; the probe of interest is channels
    report = validate_ports(codec, BiasDenoiser(latent_channels=4), HashTextEncoder())
    by_name = {p.name: p for p in report.probes}
    assert by_name["denoiser_channels"].passed


def test_text_width_probe_fails_on_mismatch():
    report = validate_ports(IdentityCodec(), BiasDenoiser(), HashTextEncoder(width=8),
                            expected_text_width=16)
    by_name = {p.name: p for p in report.probes}
    assert not by_name["text_width"].passed
    assert not report.ok


def test_text_encoder_deterministic_and_distinct():
    enc = HashTextEncoder(width=16, seq_len=4)
    a = enc.embed("A perfect screw.")
    b = enc.embed("A perfect screw.")
    c = enc.embed("A perfect bolt.")
    assert np.array_equal(a, b)
    assert a.shape == (4, 16)
    assert not np.array_equal(a, c)


def test_stored_noise_denoiser_shape_contract(rng):
    noise = rng.standard_normal((3, 8, 8))
    den = StoredNoiseDenoiser(noise)
    z_in = np.zeros((7, 8, 8))
    assert np.array_equal(den.predict_noise(z_in, 5, np.zeros((4, 16))), noise)


def test_pooled_extractor_levels(rng):
    fx = PooledFeatureExtractor(pool2=8)
    img = rng.uniform(0, 1, (64, 64, 3))
    f2 = fx.features_at(2, img)
    f3 = fx.features_at(3, img)
    assert f2.shape == (3, 8, 8)
    assert f3.shape == (3, 4, 4)
    assert np.array_equal(f2, fx.features_at(2, img))


def test_identity_perceptual_modes(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    rgb = IdentityPerceptual("rgb").layers(img)[0]
    gray = IdentityPerceptual("gray").layers(img)[0]
    assert rgb.shape == (3, 8, 8) and gray.shape == (1, 8, 8)
    assert np.allclose(gray[0], img.mean(axis=2))


def test_multiscale_perceptual_layer_shapes(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    layers = MultiScalePerceptual(pools=(1, 2)).layers(img)
    assert layers[0].shape == (3, 16, 16)
    assert layers[1].shape == (3, 8, 8)


def test_channel_weights_fallback_warns(tmp_path, caplog):
    with caplog.at_level("WARNING"):
        w = load_channel_weights(tmp_path / "missing.npy", 5)
    assert np.array_equal(w, np.ones(5))
    assert any("all-ones" in r.message for r in caplog.records)


def test_channel_weights_loads_file(tmp_path):
    np.save(tmp_path / "w.npy", np.array([0.5, 1.5, 2.0]))
    w = load_channel_weights(tmp_path / "w.npy", 3)
    assert np.allclose(w, [0.5, 1.5, 2.0])


# --------------------------------------------------------------------------
# oracle inpainter stub
# --------------------------------------------------------------------------

def test_oracle_full_mask_returns_reference(rng):
    clean = rng.uniform(0, 1, (16, 16, 3))
    noisy = rng.uniform(0, 1, (16, 16, 3))
    stub = oracle_inpainter(clean)
    assert np.array_equal(stub.inpaint(noisy, np.ones((16, 16))), clean)


def test_oracle_empty_mask_returns_input(rng):
    clean = rng.uniform(0, 1, (16, 16, 3))
    noisy = rng.uniform(0, 1, (16, 16, 3))
    stub = oracle_inpainter(clean)
    assert np.array_equal(stub.inpaint(noisy, np.zeros((16, 16))), noisy)


def test_oracle_half_mask_blends(rng):
    clean = rng.uniform(0, 1, (4, 4, 3))
    noisy = rng.uniform(0, 1, (4, 4, 3))
    mask = np.zeros((4, 4))
    mask[:2] = 1
    out = oracle_inpainter(clean).inpaint(noisy, mask)
    assert np.array_equal(out[:2], clean[:2])
    assert np.array_equal(out[2:], noisy[2:])


def test_oracle_rejects_shape_mismatch(rng):
    stub = oracle_inpainter(rng.uniform(0, 1, (8, 8, 3)))
    with pytest.raises(ParameterError):
        stub.inpaint(rng.uniform(0, 1, (4, 4, 3)), np.ones((4, 4)))
