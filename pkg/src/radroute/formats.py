"""Small binary/text format helpers: PGM, PPM, WAV, CSV streams."""

import json
import wave

import numpy as np


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if image.dtype != np.uint8:
        raise ValueError("PGM image must be uint8")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    # header: three whitespace-separated tokens after magic (no comments)
    parts = data.split(maxsplit=4)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def write_ppm(path, image: np.ndarray):
    """8-bit binary PPM (P6), image shaped (H, W, 3)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM image must be uint8 (H, W, 3)")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def db_image_to_pgm(path, values: np.ndarray, sidecar_path=None):
    """TimeFrequencyImage values (dB) to PGM with an affine dB->gray mapping.

    The mapping gray = round((db - lo) / (hi - lo) * 255) is recorded in a
    JSON sidecar so the dB scale can be recovered.
    """
    lo = float(values.min())
    hi = float(values.max())
    span = hi - lo if hi > lo else 1.0
    gray = np.round((values - lo) / span * 255.0).astype(np.uint8)
    write_pgm(path, gray)
    if sidecar_path is not None:
        with open(sidecar_path, "w") as f:
            json.dump({"db_min": lo, "db_max": hi, "rows": "channels",
                       "cols": "frames"}, f, indent=2, sort_keys=True)
            f.write("\n")


def write_wav(path, samples: np.ndarray, sample_rate: float):
    """Mono PCM-16 WAV."""
    pcm = np.clip(np.asarray(samples), -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(round(sample_rate)))
        w.writeframes(pcm.tobytes())


def read_wav(path):
    """Returns (samples in [-1, 1] float64, sample_rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError("expected mono PCM-16 WAV")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return samples, float(rate)


def write_csv(path, header: str, rows: np.ndarray, fmt: str = "%.9f"):
    np.savetxt(path, rows, delimiter=",", header=header, comments="",
               fmt=fmt)


def read_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
