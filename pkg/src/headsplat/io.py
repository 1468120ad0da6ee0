"""PNG and JSON helpers."""
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image):
    """Linear [0, 1] values to 0..255 with round-half-up."""
    return np.floor(np.clip(np.asarray(image, float), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2))


def read_json(path):
    return json.loads(Path(path).read_text())


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
