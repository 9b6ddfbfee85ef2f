import struct
import warnings

import numpy as np
import pytest
from scipy.io import wavfile

from milasc.frontend import (LOG_FLOOR, AudioClip, WavError, frame_params, hann, hz_to_mel,
                             log_mel, mel_filterbank, mel_to_hz, read_wav, stft_power)

RATE = 44100


def test_frame_params():
    assert frame_params(RATE) == (1764, 882)


def test_ten_second_clip_shape():
    clip = AudioClip(np.random.default_rng(0).standard_normal(10 * RATE), RATE)
    assert log_mel(clip).shape == (40, 500)
    assert stft_power(clip, 1764, 882).shape == (500, 883)


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(64)
    power = stft_power(AudioClip(x, 8000), 16, 8)
    n = np.arange(16)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / 16)
    for t in range(power.shape[0]):
        seg = np.zeros(16)
        chunk = x[t * 8:t * 8 + 16]
        seg[:chunk.size] = chunk
        for k in range(9):
            z = np.sum(seg * w * np.exp(-2j * np.pi * k * n / 16))
            assert power[t, k] == pytest.approx(abs(z) ** 2, rel=1e-10, abs=1e-12)


def test_short_clip_rejected():
    with pytest.raises(ValueError, match="shorter than one hop"):
        stft_power(AudioClip(np.ones(100), RATE), 1764, 882)


def test_zero_clip():
    clip = AudioClip(np.zeros(RATE), RATE)
    assert np.all(stft_power(clip, 1764, 882) == 0)
    np.testing.assert_array_equal(log_mel(clip), np.log(LOG_FLOOR))


def test_bin_centred_sinusoid_concentrates():
    frame, hop = 1764, 882
    k = 100
    t = np.arange(RATE)
    x = np.sin(2 * np.pi * k * RATE / frame * t / RATE)
    p = stft_power(AudioClip(x, RATE), frame, hop)[:-1]  # last frame is zero-padded
    near = p[:, k - 1:k + 2].sum(axis=1)
    assert np.all(near / p.sum(axis=1) >= 0.9)


def test_hann_periodic():
    w = hann(8)
    assert w[0] == 0 and w[4] == pytest.approx(1.0)
    np.testing.assert_allclose(w[1:4], w[7:4:-1])


def test_mel_scale():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), abs=1e-9)
    assert hz_to_mel(700.0) == pytest.approx(781.1728, abs=1e-4)
    f = np.array([0.0, 100.0, 4000.0, 22050.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


def test_filterbank_triangles():
    fb = mel_filterbank(883, 40, RATE)
    assert fb.shape == (40, 883)
    assert fb.max() <= 1.0 + 1e-12
    centres = mel_to_hz(np.linspace(0, hz_to_mel(RATE / 2), 42))[1:-1]
    freqs = np.arange(883) * (RATE / 2) / 882
    peaks = freqs[fb.argmax(axis=1)]
    # triangles are asymmetric in Hz, so the peak is one of the two bins around the centre
    assert np.all(np.abs(peaks - centres) < (RATE / 2) / 882)
    # neighbouring triangles sum to one between the first and last centres
    inside = (freqs >= centres[0]) & (freqs <= centres[-1])
    np.testing.assert_allclose(fb[:, inside].sum(axis=0), 1.0, atol=1e-9)


def test_filterbank_empty_row():
    with pytest.raises(ValueError, match="no FFT bin"):
        mel_filterbank(45, 40, RATE)


def test_amplitude_doubling_shifts_log_by_log4():
    x = np.random.default_rng(2).standard_normal(2 * RATE)
    a = log_mel(AudioClip(x, RATE))
    b = log_mel(AudioClip(2 * x, RATE))
    # exact up to the floor: log(4P + e) - log(P + e)
    mask = a > np.log(1e-3)
    assert np.abs((b - a)[mask] - np.log(4)).max() < 1e-6


def test_rate_mismatch_warns():
    with pytest.warns(UserWarning, match="not resampled"):
        log_mel(AudioClip(np.ones(22050), 22050))


def test_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.zeros(0), RATE)
    with pytest.raises(ValueError):
        AudioClip(np.zeros(10), 0)


def test_read_wav_int16(tmp_path):
    p = tmp_path / "a.wav"
    wavfile.write(p, RATE, np.array([32767, 0, -32768], dtype=np.int16))
    clip = read_wav(p)
    assert clip.rate == RATE
    np.testing.assert_array_equal(clip.samples, [32767 / 32768, 0.0, -1.0])


def test_read_wav_stereo_average(tmp_path):
    p = tmp_path / "s.wav"
    wavfile.write(p, RATE, np.array([[0.5, -0.5], [0.25, 0.75]], dtype=np.float32))
    np.testing.assert_allclose(read_wav(p).samples, [0.0, 0.5])


def test_read_wav_malformed(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFX\x00\x00\x00\x00garbage")
    with pytest.raises(WavError):
        read_wav(p)


def test_read_wav_empty_data(tmp_path):
    p = tmp_path / "empty.wav"
    fmt = struct.pack("<HHIIHH", 1, 1, RATE, RATE * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 0)
    p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(WavError, match="empty"):
            read_wav(p)
